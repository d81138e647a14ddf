//! Line lexer and operand parsers for the assembly dialect.

use crate::isa::{Reg, RegList, Width};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stmt {
    Label(String),
    Inst {
        mnemonic: String,
        width: Option<Width>,
        operands: Vec<String>,
    },
    Directive {
        name: String,
        args: Vec<String>,
    },
}

/// A symbolic or numeric value: `sym + add`, or just `add`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Expr {
    pub sym: Option<String>,
    pub add: i64,
}

impl Expr {
    pub fn num(v: i64) -> Expr {
        Expr { sym: None, add: v }
    }
}

pub fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Splits one source line into statements (an optional label followed by
/// an optional instruction or directive).
pub fn lex_line(line: &str) -> Result<Vec<Stmt>, String> {
    let code = match line.find(';') {
        Some(i) => &line[..i],
        None => line,
    };
    let mut rest = code.trim();
    let mut out = Vec::new();
    if let Some(colon) = rest.find(':') {
        let name = rest[..colon].trim();
        if is_ident(name) && !name.starts_with('.') {
            out.push(Stmt::Label(name.to_string()));
            rest = rest[colon + 1..].trim();
        }
    }
    if rest.is_empty() {
        return Ok(out);
    }
    let (head, tail) = match rest.find(char::is_whitespace) {
        Some(i) => (&rest[..i], rest[i..].trim()),
        None => (rest, ""),
    };
    let head = head.to_ascii_lowercase();
    let operands = split_operands(tail)?;
    if let Some(name) = head.strip_prefix('.') {
        out.push(Stmt::Directive {
            name: name.to_string(),
            args: operands,
        });
    } else {
        let (mnemonic, width) = if let Some(m) = head.strip_suffix(".w") {
            (m.to_string(), Some(Width::Wide))
        } else if let Some(m) = head.strip_suffix(".n") {
            (m.to_string(), Some(Width::Narrow))
        } else {
            (head, None)
        };
        out.push(Stmt::Inst {
            mnemonic,
            width,
            operands,
        });
    }
    Ok(out)
}

/// Comma-separated operands, keeping `[...]` and `{...}` groups whole.
pub fn split_operands(s: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            _ => {}
        }
        if depth < 0 {
            return Err(format!("unbalanced brackets in `{s}`"));
        }
        if ch == ',' && depth == 0 {
            out.push(cur.trim().to_string());
            cur.clear();
        } else {
            cur.push(ch);
        }
    }
    if depth != 0 {
        return Err(format!("unbalanced brackets in `{s}`"));
    }
    if !cur.trim().is_empty() || !out.is_empty() {
        out.push(cur.trim().to_string());
    }
    if out.iter().any(|o| o.is_empty()) {
        return Err(format!("empty operand in `{s}`"));
    }
    Ok(out)
}

pub fn parse_reg(s: &str) -> Option<Reg> {
    let s = s.trim().to_ascii_lowercase();
    match s.as_str() {
        "sp" => Some(Reg::SP),
        "lr" => Some(Reg::LR),
        "pc" => Some(Reg::PC),
        _ => {
            let n: u8 = s.strip_prefix('r')?.parse().ok()?;
            Reg::new(n)
        }
    }
}

pub fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim().replace('_', "");
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b.trim().to_string()),
        None => (false, s.strip_prefix('+').unwrap_or(&s).to_string()),
    };
    let lower = body.to_ascii_lowercase();
    let v = if let Some(h) = lower.strip_prefix("0x") {
        i64::from_str_radix(h, 16).ok()?
    } else if let Some(b) = lower.strip_prefix("0b") {
        i64::from_str_radix(b, 2).ok()?
    } else {
        lower.parse::<i64>().ok()?
    };
    Some(if neg { -v } else { v })
}

/// `123`, `0x10`, `label`, `label+4`, `label-8`.
pub fn parse_expr(s: &str) -> Option<Expr> {
    let s = s.trim();
    if let Some(v) = parse_number(s) {
        return Some(Expr::num(v));
    }
    let split = s[1..].find(['+', '-']).map(|i| i + 1);
    let (name, add) = match split {
        Some(i) => (s[..i].trim(), parse_number(&s[i..].replace(' ', ""))?),
        None => (s, 0),
    };
    is_ident(name).then(|| Expr {
        sym: Some(name.to_string()),
        add,
    })
}

/// `#expr`.
pub fn parse_imm(s: &str) -> Option<Expr> {
    parse_expr(s.trim().strip_prefix('#')?)
}

/// `{r0, r2-r4, lr}`.
pub fn parse_reglist(s: &str) -> Option<RegList> {
    let inner = s.trim().strip_prefix('{')?.strip_suffix('}')?;
    let mut mask = 0u16;
    for part in inner.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once('-') {
            let (a, b) = (parse_reg(a)?, parse_reg(b)?);
            if a.index() > b.index() {
                return None;
            }
            for i in a.index()..=b.index() {
                mask |= 1 << i;
            }
        } else {
            mask |= 1 << parse_reg(part)?.index();
        }
    }
    RegList::new(mask)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MemOperand {
    /// `[rn]`, `[rn, #imm]`
    Imm(Reg, Expr),
    /// `[rn, rm]`
    Reg(Reg, Reg),
    /// `label` (PC-relative)
    Label(Expr),
    /// `=expr` (constant load pseudo-instruction)
    Literal(Expr),
}

pub fn parse_mem(s: &str) -> Option<MemOperand> {
    let s = s.trim();
    if let Some(lit) = s.strip_prefix('=') {
        return parse_expr(lit).map(MemOperand::Literal);
    }
    if let Some(inner) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        let rn = parse_reg(parts.first()?)?;
        return match parts.len() {
            1 => Some(MemOperand::Imm(rn, Expr::num(0))),
            2 => {
                if let Some(rm) = parse_reg(parts[1]) {
                    Some(MemOperand::Reg(rn, rm))
                } else {
                    parse_imm(parts[1]).map(|e| MemOperand::Imm(rn, e))
                }
            }
            _ => None,
        };
    }
    parse_expr(s)
        .filter(|e| e.sym.is_some())
        .map(MemOperand::Label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_and_instruction_on_one_line() {
        let s = lex_line("loop:  ADD.W r0, r0, #1 ; bump").unwrap();
        assert_eq!(s[0], Stmt::Label("loop".into()));
        assert_eq!(
            s[1],
            Stmt::Inst {
                mnemonic: "add".into(),
                width: Some(Width::Wide),
                operands: vec!["r0".into(), "r0".into(), "#1".into()],
            }
        );
    }

    #[test]
    fn directives_and_groups() {
        let s = lex_line("  .table a, b, c").unwrap();
        assert_eq!(
            s[0],
            Stmt::Directive {
                name: "table".into(),
                args: vec!["a".into(), "b".into(), "c".into()]
            }
        );
        let s = lex_line("ldm r0!, {r1, r2-r4}").unwrap();
        let Stmt::Inst { operands, .. } = &s[0] else {
            panic!()
        };
        assert_eq!(
            operands,
            &vec!["r0!".to_string(), "{r1, r2-r4}".to_string()]
        );
        assert!(lex_line("ldr r0, [r1").is_err());
        assert!(lex_line("; only a comment").unwrap().is_empty());
    }

    #[test]
    fn operand_parsers() {
        assert_eq!(parse_reg("SP"), Some(Reg::SP));
        assert_eq!(parse_reg("r16"), None);
        assert_eq!(parse_number("0x1F"), Some(31));
        assert_eq!(parse_number("-0b101"), Some(-5));
        assert_eq!(
            parse_expr("table+8"),
            Some(Expr {
                sym: Some("table".into()),
                add: 8
            })
        );
        assert_eq!(
            parse_reglist("{r0, r2-r3, lr}").unwrap().mask(),
            0b0100_0000_0000_1101
        );
        assert_eq!(parse_reglist("{r3-r1}"), None);
        assert_eq!(
            parse_mem("[r1, #-4]"),
            Some(MemOperand::Imm(Reg::r(1), Expr::num(-4)))
        );
        assert_eq!(
            parse_mem("[r1, r2]"),
            Some(MemOperand::Reg(Reg::r(1), Reg::r(2)))
        );
        assert_eq!(parse_mem("=0x10"), Some(MemOperand::Literal(Expr::num(16))));
        assert!(matches!(parse_mem("data"), Some(MemOperand::Label(_))));
    }
}
