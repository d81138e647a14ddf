//! Instruction IR, condition codes, predication state and the pure
//! datapath operations of the core.

pub mod encoding;
pub mod exec;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use exec::{
    eval_cond, exec_bitfield, exec_divide, exec_mov_halves, exec_rbit, BitfieldKind, DivideOutcome,
    HalfMove,
};

/// A general register index, R0..R15.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Reg(u8);

impl Reg {
    pub const SP: Reg = Reg(13);
    pub const LR: Reg = Reg(14);
    pub const PC: Reg = Reg(15);

    pub fn new(index: u8) -> Option<Reg> {
        (index < 16).then_some(Reg(index))
    }

    /// Panics if `index >= 16`.
    pub const fn r(index: u8) -> Reg {
        assert!(index < 16);
        Reg(index)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn bits(self) -> u32 {
        self.0 as u32
    }

    pub fn is_low(self) -> bool {
        self.0 < 8
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            13 => f.write_str("sp"),
            14 => f.write_str("lr"),
            15 => f.write_str("pc"),
            n => write!(f, "r{n}"),
        }
    }
}

/// Non-empty set of registers, bit i = Ri.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegList(u16);

impl RegList {
    pub fn new(mask: u16) -> Option<RegList> {
        (mask != 0).then_some(RegList(mask))
    }

    pub fn mask(self) -> u16 {
        self.0
    }

    pub fn len(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn contains(self, r: Reg) -> bool {
        self.0 & (1 << r.0) != 0
    }

    pub fn is_low(self) -> bool {
        self.0 & 0xFF00 == 0
    }

    /// Registers in ascending order.
    pub fn iter(self) -> impl Iterator<Item = Reg> {
        (0..16u8).filter(move |i| self.0 & (1 << i) != 0).map(Reg)
    }
}

impl fmt::Display for RegList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, r) in self.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{r}")?;
        }
        f.write_str("}")
    }
}

/// Condition codes, encoded with the conventional 4-bit numbering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    Eq = 0,
    Ne = 1,
    Cs = 2,
    Cc = 3,
    Mi = 4,
    Pl = 5,
    Vs = 6,
    Vc = 7,
    Hi = 8,
    Ls = 9,
    Ge = 10,
    Lt = 11,
    Gt = 12,
    Le = 13,
    Al = 14,
}

impl Cond {
    pub const ALL: [Cond; 15] = [
        Cond::Eq,
        Cond::Ne,
        Cond::Cs,
        Cond::Cc,
        Cond::Mi,
        Cond::Pl,
        Cond::Vs,
        Cond::Vc,
        Cond::Hi,
        Cond::Ls,
        Cond::Ge,
        Cond::Lt,
        Cond::Gt,
        Cond::Le,
        Cond::Al,
    ];

    pub fn from_bits(bits: u32) -> Option<Cond> {
        Cond::ALL.get(bits as usize).copied()
    }

    pub fn bits(self) -> u32 {
        self as u32
    }

    /// The complementary condition. `AL` has none.
    pub fn invert(self) -> Option<Cond> {
        if self == Cond::Al {
            None
        } else {
            Cond::from_bits(self.bits() ^ 1)
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Eq => "eq",
            Cond::Ne => "ne",
            Cond::Cs => "cs",
            Cond::Cc => "cc",
            Cond::Mi => "mi",
            Cond::Pl => "pl",
            Cond::Vs => "vs",
            Cond::Vc => "vc",
            Cond::Hi => "hi",
            Cond::Ls => "ls",
            Cond::Ge => "ge",
            Cond::Lt => "lt",
            Cond::Gt => "gt",
            Cond::Le => "le",
            Cond::Al => "al",
        }
    }

    pub fn parse(s: &str) -> Option<Cond> {
        let s = s.to_ascii_lowercase();
        let c = match s.as_str() {
            "eq" => Cond::Eq,
            "ne" => Cond::Ne,
            "cs" | "hs" => Cond::Cs,
            "cc" | "lo" => Cond::Cc,
            "mi" => Cond::Mi,
            "pl" => Cond::Pl,
            "vs" => Cond::Vs,
            "vc" => Cond::Vc,
            "hi" => Cond::Hi,
            "ls" => Cond::Ls,
            "ge" => Cond::Ge,
            "lt" => Cond::Lt,
            "gt" => Cond::Gt,
            "le" => Cond::Le,
            "al" => Cond::Al,
            _ => return None,
        };
        Some(c)
    }
}

impl fmt::Display for Cond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash, Serialize, Deserialize)]
pub struct Flags {
    pub n: bool,
    pub z: bool,
    pub c: bool,
    pub v: bool,
}

impl Flags {
    /// Flags from the low four bits `NZCV` (bit 3 = N).
    pub fn from_nzcv(bits: u8) -> Flags {
        Flags {
            n: bits & 8 != 0,
            z: bits & 4 != 0,
            c: bits & 2 != 0,
            v: bits & 1 != 0,
        }
    }

    pub fn nzcv(self) -> u8 {
        (self.n as u8) << 3 | (self.z as u8) << 2 | (self.c as u8) << 1 | self.v as u8
    }

    /// Flags produced by `a - b`, as set by CMP.
    pub fn from_compare(a: u32, b: u32) -> Flags {
        let (res, borrow) = a.overflowing_sub(b);
        let v = ((a ^ b) & (a ^ res)) >> 31 != 0;
        Flags {
            n: res >> 31 != 0,
            z: res == 0,
            c: !borrow,
            v,
        }
    }
}

/// One slot of an IT block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ItSlot {
    Then,
    Else,
}

/// Predication state left behind by an IT instruction.
///
/// `else_mask` bit 0 describes the next instruction to execute, bit 1 the
/// one after it, and so on; it shifts right as the block is consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItState {
    pub base_cond: Cond,
    pub else_mask: u8,
    pub remaining: u8,
}

impl Default for ItState {
    fn default() -> Self {
        ItState::IDLE
    }
}

impl ItState {
    pub const IDLE: ItState = ItState {
        base_cond: Cond::Al,
        else_mask: 0,
        remaining: 0,
    };

    pub fn active(&self) -> bool {
        self.remaining > 0
    }

    /// Condition governing the next instruction, if inside a block.
    pub fn current_cond(&self) -> Option<Cond> {
        if !self.active() {
            return None;
        }
        if self.else_mask & 1 == 0 {
            Some(self.base_cond)
        } else {
            // AL blocks cannot hold else slots; the assembler rejects them.
            Some(self.base_cond.invert().unwrap_or(Cond::Al))
        }
    }

    pub fn advance(&mut self) {
        if self.remaining > 0 {
            self.remaining -= 1;
            self.else_mask >>= 1;
            if self.remaining == 0 {
                *self = ItState::IDLE;
            }
        }
    }

    pub fn is_last(&self) -> bool {
        self.remaining == 1
    }

    /// Packs into 11 bits: cond[10:7], remaining[6:4], else_mask[3:0].
    pub fn pack(&self) -> u32 {
        (self.base_cond.bits() << 7)
            | ((self.remaining as u32) << 4)
            | (self.else_mask as u32 & 0xF)
    }

    pub fn unpack(bits: u32) -> ItState {
        let remaining = ((bits >> 4) & 0x7).min(4) as u8;
        if remaining == 0 {
            return ItState::IDLE;
        }
        ItState {
            base_cond: Cond::from_bits((bits >> 7) & 0xF).unwrap_or(Cond::Al),
            else_mask: (bits & 0xF) as u8,
            remaining,
        }
    }
}

/// Validated IT block shape: 1..=4 slots, the first always `Then`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItPattern {
    slots: Vec<ItSlot>,
}

impl ItPattern {
    pub fn new(slots: Vec<ItSlot>) -> Option<ItPattern> {
        if slots.is_empty() || slots.len() > 4 || slots[0] != ItSlot::Then {
            return None;
        }
        Some(ItPattern { slots })
    }

    /// Parses the `T`/`E` suffix that follows `IT` (e.g. `"TE"` for ITTE).
    pub fn from_suffix(suffix: &str) -> Option<ItPattern> {
        let mut slots = vec![ItSlot::Then];
        for ch in suffix.chars() {
            slots.push(match ch.to_ascii_lowercase() {
                't' => ItSlot::Then,
                'e' => ItSlot::Else,
                _ => return None,
            });
        }
        ItPattern::new(slots)
    }

    pub fn slots(&self) -> &[ItSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn else_mask(&self) -> u8 {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == ItSlot::Else)
            .fold(0, |m, (i, _)| m | (1 << i))
    }

    pub fn suffix(&self) -> String {
        self.slots[1..]
            .iter()
            .map(|s| if *s == ItSlot::Then { 't' } else { 'e' })
            .collect()
    }
}

/// Starts a predicated block.
pub fn it_begin(base_cond: Cond, pattern: &ItPattern) -> ItState {
    ItState {
        base_cond,
        else_mask: pattern.else_mask(),
        remaining: pattern.len() as u8,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Orr,
    Eor,
    Lsl,
    Lsr,
}

impl AluOp {
    pub fn apply(self, a: u32, b: u32) -> u32 {
        match self {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::And => a & b,
            AluOp::Orr => a | b,
            AluOp::Eor => a ^ b,
            AluOp::Lsl => shift_left(a, b & 0xFF),
            AluOp::Lsr => shift_right(a, b & 0xFF),
        }
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::And => "and",
            AluOp::Orr => "orr",
            AluOp::Eor => "eor",
            AluOp::Lsl => "lsl",
            AluOp::Lsr => "lsr",
        }
    }
}

/// Logical shift left; amounts of 32 or more produce 0.
pub fn shift_left(v: u32, amount: u32) -> u32 {
    if amount >= 32 {
        0
    } else {
        v << amount
    }
}

/// Logical shift right; amounts of 32 or more produce 0.
pub fn shift_right(v: u32, amount: u32) -> u32 {
    if amount >= 32 {
        0
    } else {
        v >> amount
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operand {
    Reg(Reg),
    Imm(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MemSize {
    Byte,
    Half,
    Word,
}

impl MemSize {
    pub fn bytes(self) -> u32 {
        match self {
            MemSize::Byte => 1,
            MemSize::Half => 2,
            MemSize::Word => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Offset {
    Imm(i32),
    Reg(Reg),
}

/// Operation part of an instruction. Branch and literal offsets are
/// relative to the instruction's own address (literal loads from the PC
/// use the word-aligned instruction address as base).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Mov {
        rd: Reg,
        src: Operand,
    },
    Movw {
        rd: Reg,
        imm16: u16,
    },
    Movh {
        rd: Reg,
        imm16: u16,
    },
    Alu {
        op: AluOp,
        rd: Reg,
        rn: Reg,
        src: Operand,
    },
    Cmp {
        rn: Reg,
        src: Operand,
    },
    Div {
        signed: bool,
        rd: Reg,
        rn: Reg,
        rm: Reg,
    },
    Bfi {
        rd: Reg,
        rn: Reg,
        lsb: u8,
        width: u8,
    },
    Bfc {
        rd: Reg,
        lsb: u8,
        width: u8,
    },
    Ubfx {
        rd: Reg,
        rn: Reg,
        lsb: u8,
        width: u8,
    },
    Rbit {
        rd: Reg,
        rn: Reg,
    },
    B {
        cond: Cond,
        offset: i32,
    },
    Bl {
        offset: i32,
    },
    It {
        cond: Cond,
        pattern: ItPattern,
    },
    /// Table branch: index register and entry count. The word table
    /// starts at the first word boundary after the instruction.
    Tb {
        rn: Reg,
        count: u16,
    },
    Load {
        size: MemSize,
        rt: Reg,
        rn: Reg,
        offset: Offset,
    },
    Store {
        size: MemSize,
        rt: Reg,
        rn: Reg,
        offset: Offset,
    },
    Ldm {
        rn: Reg,
        list: RegList,
        writeback: bool,
    },
    Stm {
        rn: Reg,
        list: RegList,
        writeback: bool,
    },
    Nop,
    Halt,
}

impl Op {
    /// True for instructions that leave N/Z/C/V untouched by definition.
    pub fn preserves_flags(&self) -> bool {
        !matches!(self, Op::Cmp { .. })
    }

    pub fn is_branch(&self) -> bool {
        matches!(self, Op::B { .. } | Op::Bl { .. } | Op::Tb { .. })
    }

    pub fn mnemonic(&self) -> String {
        match self {
            Op::Mov { .. } => "mov".into(),
            Op::Movw { .. } => "movw".into(),
            Op::Movh { .. } => "movh".into(),
            Op::Alu { op, .. } => op.mnemonic().into(),
            Op::Cmp { .. } => "cmp".into(),
            Op::Div { signed, .. } => if *signed { "sdiv" } else { "udiv" }.into(),
            Op::Bfi { .. } => "bfi".into(),
            Op::Bfc { .. } => "bfc".into(),
            Op::Ubfx { .. } => "ubfx".into(),
            Op::Rbit { .. } => "rbit".into(),
            Op::B { cond, .. } => {
                if *cond == Cond::Al {
                    "b".into()
                } else {
                    format!("b{cond}")
                }
            }
            Op::Bl { .. } => "bl".into(),
            Op::It { pattern, .. } => format!("it{}", pattern.suffix()),
            Op::Tb { .. } => "tb".into(),
            Op::Load { size, .. } => match size {
                MemSize::Byte => "ldrb",
                MemSize::Half => "ldrh",
                MemSize::Word => "ldr",
            }
            .into(),
            Op::Store { size, .. } => match size {
                MemSize::Byte => "strb",
                MemSize::Half => "strh",
                MemSize::Word => "str",
            }
            .into(),
            Op::Ldm { .. } => "ldm".into(),
            Op::Stm { .. } => "stm".into(),
            Op::Nop => "nop".into(),
            Op::Halt => "halt".into(),
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let m = self.mnemonic();
        let opnd = |o: &Operand| match o {
            Operand::Reg(r) => r.to_string(),
            Operand::Imm(i) => format!("#{i:#x}"),
        };
        let off = |o: &Offset| match o {
            Offset::Imm(i) => format!("#{i}"),
            Offset::Reg(r) => r.to_string(),
        };
        match self {
            Op::Mov { rd, src } => write!(f, "{m} {rd}, {}", opnd(src)),
            Op::Movw { rd, imm16 } | Op::Movh { rd, imm16 } => write!(f, "{m} {rd}, #{imm16:#x}"),
            Op::Alu { rd, rn, src, .. } => write!(f, "{m} {rd}, {rn}, {}", opnd(src)),
            Op::Cmp { rn, src } => write!(f, "{m} {rn}, {}", opnd(src)),
            Op::Div { rd, rn, rm, .. } => write!(f, "{m} {rd}, {rn}, {rm}"),
            Op::Bfi { rd, rn, lsb, width } | Op::Ubfx { rd, rn, lsb, width } => {
                write!(f, "{m} {rd}, {rn}, #{lsb}, #{width}")
            }
            Op::Bfc { rd, lsb, width } => write!(f, "{m} {rd}, #{lsb}, #{width}"),
            Op::Rbit { rd, rn } => write!(f, "{m} {rd}, {rn}"),
            Op::B { offset, .. } | Op::Bl { offset } => write!(f, "{m} {offset:+}"),
            Op::It { cond, .. } => write!(f, "{m} {cond}"),
            Op::Tb { rn, count } => write!(f, "{m} {rn}, #{count}"),
            Op::Load { rt, rn, offset, .. } | Op::Store { rt, rn, offset, .. } => {
                write!(f, "{m} {rt}, [{rn}, {}]", off(offset))
            }
            Op::Ldm {
                rn,
                list,
                writeback,
            }
            | Op::Stm {
                rn,
                list,
                writeback,
            } => {
                write!(f, "{m} {rn}{}, {list}", if *writeback { "!" } else { "" })
            }
            Op::Nop | Op::Halt => f.write_str(&m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Width {
    Narrow,
    Wide,
}

impl Width {
    pub fn bits(self) -> u32 {
        match self {
            Width::Narrow => 16,
            Width::Wide => 32,
        }
    }

    pub fn bytes(self) -> u32 {
        self.bits() / 8
    }
}

/// An operation plus its encoded width.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub op: Op,
    pub width: Width,
}

impl Instruction {
    pub fn width_bits(&self) -> u32 {
        self.width.bits()
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.op)?;
        if self.width == Width::Wide {
            f.write_str(" (.w)")?;
        }
        Ok(())
    }
}
