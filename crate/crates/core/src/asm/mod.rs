//! Two-pass assembler: source text to a loadable [`ProgramImage`].
//!
//! The first pass parses every line into items and collects `.equ`
//! constants and pool membership. Layout then iterates to a fixed point,
//! widening any instruction whose narrow form cannot reach its target.
//! Emission encodes each item at its final address.

pub mod parse;
mod size;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::encoding::{narrow_form, wide_form, Encoded};
use crate::isa::{AluOp, Cond, ItPattern, MemSize, Offset, Op, Operand, Reg, Width};
use crate::memory::{MemFault, MemorySystem};
use parse::{lex_line, parse_imm, parse_mem, parse_reg, parse_reglist, Expr, MemOperand, Stmt};

pub use size::CodeSizeReport;

/// How `LDR rd, =value` is lowered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoadMode {
    /// A PC-relative load from a literal pool.
    #[default]
    Pool,
    /// A MOVW/MOVH pair.
    Movw,
}

impl FromStr for LoadMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "pool" => Ok(LoadMode::Pool),
            "movw" => Ok(LoadMode::Movw),
            other => Err(format!(
                "unknown load mode `{other}` (expected pool or movw)"
            )),
        }
    }
}

impl fmt::Display for LoadMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LoadMode::Pool => "pool",
            LoadMode::Movw => "movw",
        })
    }
}

#[derive(Debug, Clone)]
pub struct AsmOptions {
    pub mode: LoadMode,
    /// Farthest distance in bytes from a literal load to its pool entry.
    pub pool_reach: u32,
    /// Largest conditional-branch displacement in bytes.
    pub branch_reach: u32,
}

impl Default for AsmOptions {
    fn default() -> Self {
        AsmOptions {
            mode: LoadMode::Pool,
            pool_reach: 4096,
            branch_reach: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct AsmError {
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, AsmError> {
    Err(AsmError {
        line,
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub base: u32,
    #[serde(skip)]
    pub bytes: Vec<u8>,
    pub length: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub address: u32,
    pub width_bits: u32,
    pub op: Op,
    pub text: String,
    pub line: usize,
    /// True for loads that read a literal pool entry.
    pub literal: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub address: u32,
    pub entries: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgramImage {
    pub base: u32,
    pub mode: LoadMode,
    pub segments: Vec<Segment>,
    pub instructions: Vec<InstructionRecord>,
    pub pools: Vec<PoolRecord>,
    pub symbols: BTreeMap<String, u32>,
    /// `.word` and `.table` contents plus alignment padding.
    pub data_bytes: u32,
}

impl ProgramImage {
    pub fn size(&self) -> u32 {
        self.segments.iter().map(|s| s.length).sum()
    }

    pub fn pool_bytes(&self) -> u32 {
        self.pools.iter().map(|p| 4 * p.entries.len() as u32).sum()
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }

    pub fn code_size_report(&self) -> CodeSizeReport {
        CodeSizeReport::of(self)
    }

    pub fn instruction_at(&self, address: u32) -> Option<&InstructionRecord> {
        self.instructions
            .binary_search_by_key(&address, |r| r.address)
            .ok()
            .map(|i| &self.instructions[i])
    }

    /// Writes every segment into memory without timing side effects.
    pub fn load_into(&self, mem: &mut MemorySystem) -> Result<(), MemFault> {
        for s in &self.segments {
            mem.load_bytes(s.base, &s.bytes)?;
        }
        Ok(())
    }

    /// Every segment laid out from the lowest base, gaps zero-filled.
    pub fn flat_binary(&self) -> (u32, Vec<u8>) {
        let Some(lo) = self.segments.iter().map(|s| s.base).min() else {
            return (self.base, Vec::new());
        };
        let hi = self
            .segments
            .iter()
            .map(|s| s.base as u64 + s.bytes.len() as u64)
            .max()
            .unwrap_or(lo as u64);
        let mut out = vec![0u8; (hi - lo as u64) as usize];
        for s in &self.segments {
            let at = (s.base - lo) as usize;
            out[at..at + s.bytes.len()].copy_from_slice(&s.bytes);
        }
        (lo, out)
    }

    /// The machine-readable description written next to a flat binary.
    pub fn sidecar(&self) -> serde_json::Value {
        serde_json::json!({
            "base": self.base,
            "mode": self.mode,
            "segments": self.segments,
            "symbols": self.symbols,
            "instructions": self.instructions.iter().map(|r| serde_json::json!({
                "address": r.address,
                "width_bits": r.width_bits,
                "text": r.text,
                "line": r.line,
            })).collect::<Vec<_>>(),
            "pools": self.pools,
            "code_size": self.code_size_report(),
        })
    }
}

/// Parses a register name (`r0`..`r15`, `sp`, `lr`, `pc`).
pub fn parse_register(s: &str) -> Option<crate::isa::Reg> {
    parse::parse_reg(s)
}

pub fn assemble(src: &str, mode: LoadMode) -> Result<ProgramImage, AsmError> {
    assemble_with(
        src,
        &AsmOptions {
            mode,
            ..AsmOptions::default()
        },
    )
}

pub fn assemble_with(src: &str, opts: &AsmOptions) -> Result<ProgramImage, AsmError> {
    let mut asm = Assembler::new(opts.clone());
    asm.first_pass(src)?;
    asm.relax()?;
    asm.emit()
}

#[derive(Debug, Clone)]
enum Template {
    Fixed(Op),
    Branch {
        cond: Cond,
        target: Expr,
        link: bool,
    },
    /// PC-relative load of a labelled location.
    LoadLabel {
        size: MemSize,
        rt: Reg,
        target: Expr,
    },
    Literal {
        rt: Reg,
        pool: usize,
        value: Expr,
    },
    MovHalf {
        rd: Reg,
        value: Expr,
        high: bool,
    },
}

#[derive(Debug, Clone)]
struct InstItem {
    line: usize,
    template: Template,
    forced: Option<Width>,
    width: Width,
}

#[derive(Debug, Clone)]
enum Item {
    Label(String, usize),
    Inst(InstItem),
    Words { exprs: Vec<Expr>, line: usize },
    Pool(usize),
    Org(u32),
}

struct Layout {
    addrs: Vec<u32>,
    symbols: BTreeMap<String, u32>,
    pool_addrs: Vec<u32>,
}

struct Assembler {
    opts: AsmOptions,
    mode: LoadMode,
    items: Vec<Item>,
    equs: BTreeMap<String, i64>,
    pools: Vec<Vec<Expr>>,
    pending: Vec<Expr>,
    pending_tb: Option<(usize, Reg, Expr)>,
    it_remaining: usize,
    labels: HashSet<String>,
}

fn align4(a: u32) -> u32 {
    (a + 3) & !3
}

fn writes_pc(op: &Op) -> bool {
    match op {
        Op::Mov { rd, .. } | Op::Movw { rd, .. } | Op::Movh { rd, .. } | Op::Alu { rd, .. } => {
            *rd == Reg::PC
        }
        Op::Div { rd, .. } | Op::Bfi { rd, .. } | Op::Bfc { rd, .. } => *rd == Reg::PC,
        Op::Ubfx { rd, .. } | Op::Rbit { rd, .. } => *rd == Reg::PC,
        Op::Load { rt, .. } => *rt == Reg::PC,
        Op::Ldm { list, .. } => list.contains(Reg::PC),
        Op::B { .. } | Op::Bl { .. } | Op::Tb { .. } => true,
        _ => false,
    }
}

impl Assembler {
    fn new(opts: AsmOptions) -> Assembler {
        Assembler {
            mode: opts.mode,
            opts,
            items: Vec::new(),
            equs: BTreeMap::new(),
            pools: Vec::new(),
            pending: Vec::new(),
            pending_tb: None,
            it_remaining: 0,
            labels: HashSet::new(),
        }
    }

    fn first_pass(&mut self, src: &str) -> Result<(), AsmError> {
        let mut stmts = Vec::new();
        for (i, text) in src.lines().enumerate() {
            let line = i + 1;
            for s in lex_line(text).or_else(|m| err(line, m))? {
                if let Stmt::Directive { name, args } = &s {
                    if name == "equ" {
                        self.define_equ(line, args)?;
                        continue;
                    }
                }
                stmts.push((line, s));
            }
        }
        for (line, s) in stmts {
            self.statement(line, s)?;
        }
        let last = src.lines().count();
        if let Some((l, ..)) = self.pending_tb {
            return err(l, "tb must be followed by a .table directive");
        }
        if self.it_remaining > 0 {
            return err(last, "IT block is missing instructions at end of input");
        }
        self.flush_pool();
        Ok(())
    }

    fn define_equ(&mut self, line: usize, args: &[String]) -> Result<(), AsmError> {
        let [name, value] = args else {
            return err(line, ".equ takes a name and a value");
        };
        let Some(e) = parse::parse_expr(value) else {
            return err(line, format!("bad value `{value}`"));
        };
        let v = self.const_value(line, &e)?;
        if !parse::is_ident(name) || self.equs.insert(name.clone(), v).is_some() {
            return err(line, format!("bad or duplicate constant name `{name}`"));
        }
        Ok(())
    }

    fn const_value(&self, line: usize, e: &Expr) -> Result<i64, AsmError> {
        match &e.sym {
            None => Ok(e.add),
            Some(s) => match self.equs.get(s) {
                Some(v) => Ok(v + e.add),
                None => err(
                    line,
                    format!("`{s}` is not a constant; use ldr rd, ={s} for addresses"),
                ),
            },
        }
    }

    fn flush_pool(&mut self) {
        let entries = std::mem::take(&mut self.pending);
        self.pools.push(entries);
        self.items.push(Item::Pool(self.pools.len() - 1));
    }

    fn statement(&mut self, line: usize, s: Stmt) -> Result<(), AsmError> {
        if let Some((tb_line, rn, default)) = self.pending_tb.take() {
            match &s {
                Stmt::Directive { name, args } if name == "table" => {
                    return self.table_branch(tb_line, rn, default, args);
                }
                _ => return err(tb_line, "tb must be followed by a .table directive"),
            }
        }
        match s {
            Stmt::Label(name) => {
                if self.it_remaining > 0 {
                    return err(line, "labels inside an IT block are not allowed");
                }
                if self.equs.contains_key(&name) || !self.labels.insert(name.clone()) {
                    return err(line, format!("duplicate label `{name}`"));
                }
                self.items.push(Item::Label(name, line));
            }
            Stmt::Directive { name, args } => {
                if self.it_remaining > 0 {
                    return err(line, "directives inside an IT block are not allowed");
                }
                self.directive(line, &name, &args)?;
            }
            Stmt::Inst {
                mnemonic,
                width,
                operands,
            } => self.instruction(line, &mnemonic, width, &operands)?,
        }
        Ok(())
    }

    fn directive(&mut self, line: usize, name: &str, args: &[String]) -> Result<(), AsmError> {
        let exprs = || -> Result<Vec<Expr>, AsmError> {
            args.iter()
                .map(|a| {
                    parse::parse_expr(a).ok_or_else(|| AsmError {
                        line,
                        message: format!("bad expression `{a}`"),
                    })
                })
                .collect()
        };
        match name {
            "org" => {
                let [a] = args else {
                    return err(line, ".org takes one address");
                };
                let e = parse::parse_expr(a).ok_or_else(|| AsmError {
                    line,
                    message: format!("bad address `{a}`"),
                })?;
                let v = self.const_value(line, &e)?;
                let Ok(addr) = u32::try_from(v) else {
                    return err(line, "address out of range");
                };
                if addr % 2 != 0 {
                    return err(line, ".org address must be halfword aligned");
                }
                self.flush_pool();
                self.items.push(Item::Org(addr));
            }
            "word" => {
                let exprs = exprs()?;
                if exprs.is_empty() {
                    return err(line, ".word needs at least one value");
                }
                self.items.push(Item::Words { exprs, line });
            }
            "table" => {
                let exprs = exprs()?;
                if exprs.is_empty() {
                    return err(line, ".table needs at least one label");
                }
                self.items.push(Item::Words { exprs, line });
            }
            "pool" => {
                if !args.is_empty() {
                    return err(line, ".pool takes no arguments");
                }
                self.flush_pool();
            }
            "mode" => {
                let [m] = args else {
                    return err(line, ".mode takes pool or movw");
                };
                self.mode = m.parse().or_else(|e| err(line, e))?;
            }
            other => return err(line, format!("unknown directive .{other}")),
        }
        Ok(())
    }

    fn table_branch(
        &mut self,
        line: usize,
        rn: Reg,
        default: Expr,
        args: &[String],
    ) -> Result<(), AsmError> {
        let exprs = args
            .iter()
            .map(|a| parse::parse_expr(a).filter(|e| e.sym.is_some()))
            .collect::<Option<Vec<_>>>();
        let Some(exprs) = exprs.filter(|e| !e.is_empty()) else {
            return err(line, ".table after tb needs a list of labels");
        };
        let Ok(count) = u16::try_from(exprs.len()) else {
            return err(line, "jump table too large");
        };
        let fixed = |op| Template::Fixed(op);
        self.push_inst(
            line,
            fixed(Op::Cmp {
                rn,
                src: Operand::Imm(count as u32),
            }),
            None,
        )?;
        self.push_inst(
            line,
            Template::Branch {
                cond: Cond::Cs,
                target: default,
                link: false,
            },
            None,
        )?;
        self.push_inst(line, fixed(Op::Tb { rn, count }), None)?;
        self.items.push(Item::Words { exprs, line });
        Ok(())
    }

    fn push_inst(
        &mut self,
        line: usize,
        template: Template,
        forced: Option<Width>,
    ) -> Result<(), AsmError> {
        let width = match (&template, forced) {
            (_, Some(w)) => w,
            (Template::Fixed(op), None) => {
                if narrow_form(op).is_some() {
                    Width::Narrow
                } else if wide_form(op).is_some() {
                    Width::Wide
                } else {
                    return err(line, format!("`{op}` has no encoding"));
                }
            }
            (Template::Branch { link: true, .. } | Template::MovHalf { .. }, None) => Width::Wide,
            (Template::LoadLabel { rt, .. } | Template::Literal { rt, .. }, None) => {
                if rt.is_low() {
                    Width::Narrow
                } else {
                    Width::Wide
                }
            }
            _ => Width::Narrow,
        };
        if let Template::Fixed(op) = &template {
            let ok = match width {
                Width::Narrow => narrow_form(op).is_some(),
                Width::Wide => wide_form(op).is_some(),
            };
            if !ok {
                return err(line, format!("`{op}` has no {}-bit form", width.bits()));
            }
        }
        self.items.push(Item::Inst(InstItem {
            line,
            template,
            forced,
            width,
        }));
        Ok(())
    }
}

impl Assembler {
    fn instruction(
        &mut self,
        line: usize,
        mnemonic: &str,
        forced: Option<Width>,
        ops: &[String],
    ) -> Result<(), AsmError> {
        if mnemonic == "tb" {
            if self.it_remaining > 0 {
                return err(line, "tb is not allowed inside an IT block");
            }
            let [rn, default] = ops else {
                return err(line, "tb takes an index register and a default label");
            };
            let rn = self.reg(line, rn)?;
            let default = self.label_expr(line, default)?;
            self.pending_tb = Some((line, rn, default));
            return Ok(());
        }
        let templates = self.lower(line, mnemonic, ops)?;
        if self.it_remaining > 0 {
            if templates.len() != 1 {
                return err(line, format!("`{mnemonic}` expands to several instructions; not allowed inside an IT block"));
            }
            let branchy = match &templates[0] {
                Template::Fixed(Op::It { .. }) => return err(line, "nested IT block"),
                Template::Branch { cond, .. } if *cond != Cond::Al => {
                    return err(line, "conditional branch inside an IT block; use plain b")
                }
                Template::Branch { .. } => true,
                Template::Fixed(op) => writes_pc(op),
                Template::LoadLabel { rt, .. } | Template::Literal { rt, .. } => *rt == Reg::PC,
                Template::MovHalf { .. } => false,
            };
            if branchy && self.it_remaining != 1 {
                return err(
                    line,
                    "a branch may only occupy the last slot of an IT block",
                );
            }
            self.it_remaining -= 1;
        } else if let Some(Template::Fixed(Op::It { pattern, .. })) = templates.first() {
            self.it_remaining = pattern.len();
        }
        for t in templates {
            self.push_inst(line, t, forced)?;
        }
        Ok(())
    }

    fn reg(&self, line: usize, s: &str) -> Result<Reg, AsmError> {
        parse_reg(s).ok_or_else(|| AsmError {
            line,
            message: format!("expected a register, found `{s}`"),
        })
    }

    fn label_expr(&self, line: usize, s: &str) -> Result<Expr, AsmError> {
        match parse::parse_expr(s) {
            Some(e) if e.sym.is_some() => Ok(e),
            _ => err(line, format!("expected a label, found `{s}`")),
        }
    }

    fn imm(&self, line: usize, s: &str) -> Result<i64, AsmError> {
        match parse_imm(s) {
            Some(e) => self.const_value(line, &e),
            None => err(line, format!("expected an immediate `#value`, found `{s}`")),
        }
    }

    fn imm_in(&self, line: usize, s: &str, lo: i64, hi: i64) -> Result<i64, AsmError> {
        let v = self.imm(line, s)?;
        if v < lo || v > hi {
            return err(line, format!("immediate {v} outside {lo}..={hi}"));
        }
        Ok(v)
    }

    fn operand(&self, line: usize, s: &str) -> Result<Result<Reg, i64>, AsmError> {
        if let Some(r) = parse_reg(s) {
            Ok(Ok(r))
        } else {
            self.imm(line, s).map(Err)
        }
    }

    fn bitfield(&self, line: usize, lsb: &str, width: &str) -> Result<(u8, u8), AsmError> {
        let l = self.imm_in(line, lsb, 0, 31)?;
        let w = self.imm_in(line, width, 1, 32)?;
        if l + w > 32 {
            return err(
                line,
                format!("bit field lsb {l} width {w} runs past bit 31"),
            );
        }
        Ok((l as u8, w as u8))
    }

    fn lower(&mut self, line: usize, m: &str, ops: &[String]) -> Result<Vec<Template>, AsmError> {
        let fixed = |op| Ok(vec![Template::Fixed(op)]);
        let arity = |n: usize| -> Result<(), AsmError> {
            if ops.len() != n {
                return err(
                    line,
                    format!("`{m}` takes {n} operand(s), found {}", ops.len()),
                );
            }
            Ok(())
        };
        let alu = match m {
            "add" => Some(AluOp::Add),
            "sub" => Some(AluOp::Sub),
            "and" => Some(AluOp::And),
            "orr" => Some(AluOp::Orr),
            "eor" => Some(AluOp::Eor),
            "lsl" => Some(AluOp::Lsl),
            "lsr" => Some(AluOp::Lsr),
            _ => None,
        };
        if let Some(mut op) = alu {
            let (rd, rn, src) = match ops {
                [rd, src] => (self.reg(line, rd)?, self.reg(line, rd)?, src),
                [rd, rn, src] => (self.reg(line, rd)?, self.reg(line, rn)?, src),
                _ => return err(line, format!("`{m}` takes 2 or 3 operands")),
            };
            let src = match self.operand(line, src)? {
                Ok(r) => Operand::Reg(r),
                Err(mut v) => {
                    if v < 0 && matches!(op, AluOp::Add | AluOp::Sub) {
                        op = if op == AluOp::Add {
                            AluOp::Sub
                        } else {
                            AluOp::Add
                        };
                        v = -v;
                    }
                    let max = if matches!(op, AluOp::Lsl | AluOp::Lsr) {
                        31
                    } else {
                        0xFFF
                    };
                    if !(0..=max).contains(&v) {
                        return err(line, format!("immediate {v} out of range for `{m}`"));
                    }
                    Operand::Imm(v as u32)
                }
            };
            return fixed(Op::Alu { op, rd, rn, src });
        }
        let mem_size = match m {
            "ldr" | "str" => Some(MemSize::Word),
            "ldrb" | "strb" => Some(MemSize::Byte),
            "ldrh" | "strh" => Some(MemSize::Half),
            _ => None,
        };
        if let Some(size) = mem_size {
            arity(2)?;
            let store = m.starts_with("str");
            let rt = self.reg(line, &ops[0])?;
            let Some(mem) = parse_mem(&ops[1]) else {
                return err(line, format!("bad memory operand `{}`", ops[1]));
            };
            let (rn, offset) = match mem {
                MemOperand::Imm(rn, e) => {
                    let v = self.const_value(line, &e)?;
                    let Ok(off) = i32::try_from(v) else {
                        return err(line, "offset out of range");
                    };
                    (rn, Offset::Imm(off))
                }
                MemOperand::Reg(rn, rm) => (rn, Offset::Reg(rm)),
                MemOperand::Label(target) if !store => {
                    return Ok(vec![Template::LoadLabel { size, rt, target }]);
                }
                MemOperand::Literal(value) if !store && size == MemSize::Word => {
                    return Ok(self.literal(rt, value));
                }
                _ => return err(line, format!("`{m}` cannot take `{}`", ops[1])),
            };
            let op = if store {
                Op::Store {
                    size,
                    rt,
                    rn,
                    offset,
                }
            } else {
                Op::Load {
                    size,
                    rt,
                    rn,
                    offset,
                }
            };
            return fixed(op);
        }
        if let Some(suffix) = m.strip_prefix("it") {
            arity(1)?;
            let Some(pattern) = ItPattern::from_suffix(suffix) else {
                return err(line, format!("bad IT pattern `{m}`"));
            };
            let Some(cond) = Cond::parse(&ops[0]) else {
                return err(line, format!("bad condition `{}`", ops[0]));
            };
            if cond == Cond::Al && pattern.len() > 1 && pattern.else_mask() != 0 {
                return err(line, "an AL IT block cannot have else slots");
            }
            return fixed(Op::It { cond, pattern });
        }
        match m {
            "nop" => {
                arity(0)?;
                fixed(Op::Nop)
            }
            "halt" => {
                arity(0)?;
                fixed(Op::Halt)
            }
            "mov" => {
                arity(2)?;
                let rd = self.reg(line, &ops[0])?;
                match self.operand(line, &ops[1])? {
                    Ok(rm) => fixed(Op::Mov {
                        rd,
                        src: Operand::Reg(rm),
                    }),
                    Err(v) if (0..=0xFFF).contains(&v) => fixed(Op::Mov {
                        rd,
                        src: Operand::Imm(v as u32),
                    }),
                    Err(v) => err(
                        line,
                        format!("immediate {v} too large for mov; use ldr {}, ={v}", ops[0]),
                    ),
                }
            }
            "movw" | "movh" => {
                arity(2)?;
                let rd = self.reg(line, &ops[0])?;
                let imm16 = self.imm_in(line, &ops[1], 0, 0xFFFF)? as u16;
                fixed(if m == "movw" {
                    Op::Movw { rd, imm16 }
                } else {
                    Op::Movh { rd, imm16 }
                })
            }
            "bx" => {
                arity(1)?;
                let rm = self.reg(line, &ops[0])?;
                fixed(Op::Mov {
                    rd: Reg::PC,
                    src: Operand::Reg(rm),
                })
            }
            "cmp" => {
                arity(2)?;
                let rn = self.reg(line, &ops[0])?;
                let src = match self.operand(line, &ops[1])? {
                    Ok(r) => Operand::Reg(r),
                    Err(v) if (0..=0xFFF).contains(&v) => Operand::Imm(v as u32),
                    Err(v) => return err(line, format!("immediate {v} out of range for cmp")),
                };
                fixed(Op::Cmp { rn, src })
            }
            "udiv" | "sdiv" => {
                arity(3)?;
                fixed(Op::Div {
                    signed: m == "sdiv",
                    rd: self.reg(line, &ops[0])?,
                    rn: self.reg(line, &ops[1])?,
                    rm: self.reg(line, &ops[2])?,
                })
            }
            "bfi" | "ubfx" => {
                arity(4)?;
                let rd = self.reg(line, &ops[0])?;
                let rn = self.reg(line, &ops[1])?;
                let (lsb, width) = self.bitfield(line, &ops[2], &ops[3])?;
                fixed(if m == "bfi" {
                    Op::Bfi { rd, rn, lsb, width }
                } else {
                    Op::Ubfx { rd, rn, lsb, width }
                })
            }
            "bfc" => {
                arity(3)?;
                let rd = self.reg(line, &ops[0])?;
                let (lsb, width) = self.bitfield(line, &ops[1], &ops[2])?;
                fixed(Op::Bfc { rd, lsb, width })
            }
            "rbit" => {
                arity(2)?;
                fixed(Op::Rbit {
                    rd: self.reg(line, &ops[0])?,
                    rn: self.reg(line, &ops[1])?,
                })
            }
            "ldm" | "stm" => {
                arity(2)?;
                let (base, writeback) = match ops[0].strip_suffix('!') {
                    Some(b) => (b, true),
                    None => (ops[0].as_str(), false),
                };
                let rn = self.reg(line, base)?;
                let Some(list) = parse_reglist(&ops[1]) else {
                    return err(line, format!("bad register list `{}`", ops[1]));
                };
                if writeback && list.contains(rn) {
                    return err(line, "base register in the list with writeback");
                }
                fixed(if m == "ldm" {
                    Op::Ldm {
                        rn,
                        list,
                        writeback,
                    }
                } else {
                    Op::Stm {
                        rn,
                        list,
                        writeback,
                    }
                })
            }
            "bl" => {
                arity(1)?;
                let target = self.label_expr(line, &ops[0])?;
                Ok(vec![Template::Branch {
                    cond: Cond::Al,
                    target,
                    link: true,
                }])
            }
            _ => {
                let cond = match m.strip_prefix('b') {
                    Some("") => Some(Cond::Al),
                    Some(c) => Cond::parse(c),
                    None => None,
                };
                let Some(cond) = cond else {
                    return err(line, format!("unknown mnemonic `{m}`"));
                };
                arity(1)?;
                let target = self.label_expr(line, &ops[0])?;
                Ok(vec![Template::Branch {
                    cond,
                    target,
                    link: false,
                }])
            }
        }
    }

    fn literal(&mut self, rt: Reg, value: Expr) -> Vec<Template> {
        match self.mode {
            LoadMode::Pool => {
                if !self.pending.contains(&value) {
                    self.pending.push(value.clone());
                }
                vec![Template::Literal {
                    rt,
                    pool: self.pools.len(),
                    value,
                }]
            }
            LoadMode::Movw => vec![
                Template::MovHalf {
                    rd: rt,
                    value: value.clone(),
                    high: false,
                },
                Template::MovHalf {
                    rd: rt,
                    value,
                    high: true,
                },
            ],
        }
    }

    fn layout(&self) -> Result<Layout, AsmError> {
        let mut addrs = vec![0u32; self.items.len()];
        let mut pool_addrs = vec![0u32; self.pools.len()];
        let mut symbols = BTreeMap::new();
        let mut waiting: Vec<&str> = Vec::new();
        let mut cursor: u64 = 0;
        for (i, item) in self.items.iter().enumerate() {
            let (start, len) = match item {
                Item::Label(name, _) => {
                    waiting.push(name);
                    continue;
                }
                Item::Org(a) => (*a as u64, 0),
                Item::Inst(it) => (cursor, it.width.bytes() as u64),
                Item::Words { exprs, .. } => (align4(cursor as u32) as u64, 4 * exprs.len() as u64),
                Item::Pool(p) => {
                    let n = self.pools[*p].len() as u64;
                    let start = if n == 0 {
                        cursor
                    } else {
                        align4(cursor as u32) as u64
                    };
                    pool_addrs[*p] = start as u32;
                    (start, 4 * n)
                }
            };
            if start + len > 1 << 32 {
                let line = self.item_line(i);
                return err(line, "image runs past the end of the address space");
            }
            for name in waiting.drain(..) {
                symbols.insert(name.to_string(), start as u32);
            }
            addrs[i] = start as u32;
            cursor = start + len;
        }
        for name in waiting {
            symbols.insert(name.to_string(), cursor as u32);
        }
        Ok(Layout {
            addrs,
            symbols,
            pool_addrs,
        })
    }

    fn item_line(&self, i: usize) -> usize {
        self.items[..=i]
            .iter()
            .rev()
            .find_map(|it| match it {
                Item::Label(_, l) | Item::Words { line: l, .. } => Some(*l),
                Item::Inst(x) => Some(x.line),
                _ => None,
            })
            .unwrap_or(0)
    }

    fn resolve(&self, line: usize, e: &Expr, lay: &Layout) -> Result<i64, AsmError> {
        match &e.sym {
            None => Ok(e.add),
            Some(s) => match lay.symbols.get(s) {
                Some(a) => Ok(*a as i64 + e.add),
                None => match self.equs.get(s) {
                    Some(v) => Ok(v + e.add),
                    None => err(line, format!("undefined label `{s}`")),
                },
            },
        }
    }

    fn resolve_u32(&self, line: usize, e: &Expr, lay: &Layout) -> Result<u32, AsmError> {
        let v = self.resolve(line, e, lay)?;
        if v < i32::MIN as i64 || v > u32::MAX as i64 {
            return err(line, format!("value {v} does not fit in 32 bits"));
        }
        Ok(v as u32)
    }

    /// The concrete operation for an instruction placed at `addr`.
    fn build_op(&self, it: &InstItem, addr: u32, lay: &Layout) -> Result<Op, AsmError> {
        let line = it.line;
        Ok(match &it.template {
            Template::Fixed(op) => op.clone(),
            Template::Branch { cond, target, link } => {
                let t = self.resolve_u32(line, target, lay)?;
                let off = t as i64 - addr as i64;
                if !*link && off.unsigned_abs() > self.opts.branch_reach as u64 {
                    return err(
                        line,
                        format!("branch target {off:+} bytes away is out of range"),
                    );
                }
                let offset = off as i32;
                if *link {
                    Op::Bl { offset }
                } else {
                    Op::B {
                        cond: *cond,
                        offset,
                    }
                }
            }
            Template::LoadLabel { size, rt, target } => {
                let t = self.resolve_u32(line, target, lay)?;
                let off = t as i64 - (addr & !3) as i64;
                Op::Load {
                    size: *size,
                    rt: *rt,
                    rn: Reg::PC,
                    offset: Offset::Imm(off as i32),
                }
            }
            Template::Literal { rt, pool, value } => {
                let index = self.pools[*pool]
                    .iter()
                    .position(|v| v == value)
                    .unwrap_or(0);
                let entry = lay.pool_addrs[*pool] + 4 * index as u32;
                let off = entry as i64 - (addr & !3) as i64;
                if off < 0 || off >= self.opts.pool_reach as i64 {
                    return err(
                        line,
                        format!("literal pool entry is {off} bytes away; insert a .pool closer to this load"),
                    );
                }
                Op::Load {
                    size: MemSize::Word,
                    rt: *rt,
                    rn: Reg::PC,
                    offset: Offset::Imm(off as i32),
                }
            }
            Template::MovHalf { rd, value, high } => {
                let v = self.resolve_u32(line, value, lay)?;
                if *high {
                    Op::Movh {
                        rd: *rd,
                        imm16: (v >> 16) as u16,
                    }
                } else {
                    Op::Movw {
                        rd: *rd,
                        imm16: v as u16,
                    }
                }
            }
        })
    }

    /// Widens narrow instructions until every one fits its final layout.
    /// Widths only ever grow, so this terminates.
    fn relax(&mut self) -> Result<(), AsmError> {
        loop {
            let lay = self.layout()?;
            let mut widen = Vec::new();
            for (i, item) in self.items.iter().enumerate() {
                if let Item::Inst(it) = item {
                    if it.width == Width::Narrow && it.forced.is_none() {
                        let op = self.build_op(it, lay.addrs[i], &lay)?;
                        if narrow_form(&op).is_none() {
                            widen.push(i);
                        }
                    }
                }
            }
            if widen.is_empty() {
                return Ok(());
            }
            for i in widen {
                if let Item::Inst(it) = &mut self.items[i] {
                    it.width = Width::Wide;
                }
            }
        }
    }

    fn emit(self) -> Result<ProgramImage, AsmError> {
        let lay = self.layout()?;
        let mut segments: Vec<Segment> = Vec::new();
        let mut cur = Segment {
            base: 0,
            bytes: Vec::new(),
            length: 0,
        };
        let mut data_bytes = 0u32;
        let mut instructions = Vec::new();
        let mut pools = Vec::new();
        let put = |cur: &mut Segment, addr: u32, bytes: &[u8], data: &mut u32| {
            let pad = addr - (cur.base + cur.bytes.len() as u32);
            *data += pad;
            cur.bytes.extend(std::iter::repeat_n(0, pad as usize));
            cur.bytes.extend_from_slice(bytes);
        };
        for (i, item) in self.items.iter().enumerate() {
            let addr = lay.addrs[i];
            match item {
                Item::Label(..) => {}
                Item::Org(a) => {
                    let next = Segment {
                        base: *a,
                        bytes: Vec::new(),
                        length: 0,
                    };
                    let done = std::mem::replace(&mut cur, next);
                    if !done.bytes.is_empty() {
                        segments.push(done);
                    }
                }
                Item::Inst(it) => {
                    let op = self.build_op(it, addr, &lay)?;
                    let enc = match it.width {
                        Width::Narrow => narrow_form(&op).map(Encoded::Narrow),
                        Width::Wide => wide_form(&op).map(Encoded::Wide),
                    };
                    let Some(enc) = enc else {
                        let why = match &it.template {
                            Template::Branch { .. } => "branch target out of range".to_string(),
                            Template::LoadLabel { .. } | Template::Literal { .. } => {
                                "PC-relative target out of reach".to_string()
                            }
                            _ => format!("`{op}` has no {}-bit form", it.width.bits()),
                        };
                        return err(it.line, why);
                    };
                    let mut pad = 0;
                    put(&mut cur, addr, &enc.to_bytes(), &mut pad);
                    data_bytes += pad;
                    instructions.push(InstructionRecord {
                        address: addr,
                        width_bits: it.width.bits(),
                        text: op.to_string(),
                        op,
                        line: it.line,
                        literal: matches!(it.template, Template::Literal { .. }),
                    });
                }
                Item::Words { exprs, line } => {
                    let mut bytes = Vec::with_capacity(4 * exprs.len());
                    for e in exprs {
                        bytes.extend(self.resolve_u32(*line, e, &lay)?.to_le_bytes());
                    }
                    data_bytes += bytes.len() as u32;
                    put(&mut cur, addr, &bytes, &mut data_bytes);
                }
                Item::Pool(p) => {
                    if self.pools[*p].is_empty() {
                        continue;
                    }
                    let mut entries = Vec::new();
                    for e in &self.pools[*p] {
                        entries.push(self.resolve_u32(self.item_line(i), e, &lay)?);
                    }
                    let bytes: Vec<u8> = entries.iter().flat_map(|v| v.to_le_bytes()).collect();
                    put(&mut cur, addr, &bytes, &mut data_bytes);
                    pools.push(PoolRecord {
                        address: addr,
                        entries,
                    });
                }
            }
        }
        if !cur.bytes.is_empty() {
            segments.push(cur);
        }
        instructions.sort_by_key(|r: &InstructionRecord| r.address);
        for s in &mut segments {
            s.length = s.bytes.len() as u32;
        }
        let mut sorted: Vec<&Segment> = segments.iter().collect();
        sorted.sort_by_key(|s| s.base);
        for w in sorted.windows(2) {
            if w[0].base as u64 + w[0].length as u64 > w[1].base as u64 {
                return err(
                    0,
                    format!("segments at {:#x} and {:#x} overlap", w[0].base, w[1].base),
                );
            }
        }
        Ok(ProgramImage {
            base: segments.first().map_or(0, |s| s.base),
            mode: self.opts.mode,
            segments,
            instructions,
            pools,
            symbols: lay.symbols,
            data_bytes,
        })
    }
}
