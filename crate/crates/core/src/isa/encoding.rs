//! Compact 16/32-bit machine encoding of the instruction IR.
//!
//! This is the simulator's own format, not an architectural one. A
//! halfword whose top five bits are `0b11101`, `0b11110` or `0b11111` is
//! the first half of a 32-bit instruction; everything else is a complete
//! 16-bit instruction. 32-bit instructions are stored as two little-endian
//! halfwords, most significant half first.
//!
//! 16-bit forms (`top5` = bits 15..11):
//!
//! | top5  | form                                   |
//! |-------|----------------------------------------|
//! | 0     | `MOV  rd, #imm8`                       |
//! | 1     | `CMP  rn, #imm8`                       |
//! | 2, 3  | `ADD/SUB rd, #imm8` (rd = rd op imm)   |
//! | 4, 5  | `LSL/LSR rd, rm, #imm5`                |
//! | 6     | `ADD/SUB rd, rn, rm` or `#imm3`        |
//! | 7..12 | `LDR/STR/LDRB/STRB/LDRH/STRH [rn,#i5]` |
//! | 13    | `LDR rt, [pc, #imm8*4]`                |
//! | 14,15 | `LDR/STR rt, [sp, #imm8*4]`            |
//! | 16..19| `LDM/LDM!/STM/STM! rn, {r0-r7}`        |
//! | 20    | low-register ALU, rd = rd op rm        |
//! | 21    | high-register MOV/ADD/CMP              |
//! | 22    | NOP, HALT, IT                          |
//! | 26,27 | `B<cond>` with an 8-bit halfword offset|

use thiserror::Error;

use super::{
    AluOp, Cond, Instruction, ItPattern, ItSlot, MemSize, Offset, Op, Operand, Reg, RegList, Width,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoded {
    Narrow(u16),
    Wide(u32),
}

impl Encoded {
    pub fn width(self) -> Width {
        match self {
            Encoded::Narrow(_) => Width::Narrow,
            Encoded::Wide(_) => Width::Wide,
        }
    }

    /// Little-endian image bytes.
    pub fn to_bytes(self) -> Vec<u8> {
        match self {
            Encoded::Narrow(h) => h.to_le_bytes().to_vec(),
            Encoded::Wide(w) => {
                let mut v = ((w >> 16) as u16).to_le_bytes().to_vec();
                v.extend_from_slice(&(w as u16).to_le_bytes());
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("`{0}` has no encoding at the requested width")]
    NoForm(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("undefined instruction {0:#010x}")]
    Undefined(u32),
}

pub fn is_wide_prefix(h1: u16) -> bool {
    h1 >> 11 >= 0b11101
}

const ALU_OPS: [AluOp; 7] = [
    AluOp::Add,
    AluOp::Sub,
    AluOp::And,
    AluOp::Orr,
    AluOp::Eor,
    AluOp::Lsl,
    AluOp::Lsr,
];

fn alu_index(op: AluOp) -> u32 {
    ALU_OPS.iter().position(|o| *o == op).unwrap() as u32
}

fn lo(r: Reg) -> Option<u32> {
    r.is_low().then(|| r.bits())
}

fn form(top5: u32, payload: u32) -> u16 {
    debug_assert!(payload < 1 << 11);
    ((top5 << 11) | payload) as u16
}

fn fits_signed(v: i32, bits: u32) -> bool {
    let lim = 1i64 << (bits - 1);
    (v as i64) >= -lim && (v as i64) < lim
}

fn mem_index(size: MemSize, store: bool) -> u32 {
    let base = match size {
        MemSize::Word => 0,
        MemSize::Byte => 2,
        MemSize::Half => 4,
    };
    base + store as u32
}

fn mem_from_index(i: u32) -> (MemSize, bool) {
    let size = match i / 2 {
        0 => MemSize::Word,
        1 => MemSize::Byte,
        _ => MemSize::Half,
    };
    (size, i % 2 == 1)
}

/// The 16-bit form of `op`, if one exists.
pub fn narrow_form(op: &Op) -> Option<u16> {
    match *op {
        Op::Mov {
            rd,
            src: Operand::Imm(i),
        } if i <= 0xFF => Some(form(0, lo(rd)? << 8 | i)),
        Op::Mov {
            rd,
            src: Operand::Reg(rm),
        } => {
            if let (Some(d), Some(m)) = (lo(rd), lo(rm)) {
                Some(form(20, 5 << 6 | m << 3 | d))
            } else {
                Some(form(21, rd.bits() << 4 | rm.bits()))
            }
        }
        Op::Cmp {
            rn,
            src: Operand::Imm(i),
        } if i <= 0xFF => Some(form(1, lo(rn)? << 8 | i)),
        Op::Cmp {
            rn,
            src: Operand::Reg(rm),
        } => {
            if let (Some(n), Some(m)) = (lo(rn), lo(rm)) {
                Some(form(20, 6 << 6 | m << 3 | n))
            } else {
                Some(form(21, 2 << 8 | rn.bits() << 4 | rm.bits()))
            }
        }
        Op::Alu { op, rd, rn, src } => narrow_alu(op, rd, rn, src),
        Op::Load {
            size,
            rt,
            rn,
            offset: Offset::Imm(off),
        } => narrow_mem(size, false, rt, rn, off),
        Op::Store {
            size,
            rt,
            rn,
            offset: Offset::Imm(off),
        } => narrow_mem(size, true, rt, rn, off),
        Op::Ldm {
            rn,
            list,
            writeback,
        } if list.is_low() => Some(form(
            16 + writeback as u32,
            lo(rn)? << 8 | list.mask() as u32,
        )),
        Op::Stm {
            rn,
            list,
            writeback,
        } if list.is_low() => Some(form(
            18 + writeback as u32,
            lo(rn)? << 8 | list.mask() as u32,
        )),
        Op::B { cond, offset } => {
            if offset % 2 != 0 || !(-256..=254).contains(&offset) {
                return None;
            }
            let imm8 = ((offset / 2) as u32) & 0xFF;
            Some((0b1101 << 12 | cond.bits() << 8 | imm8) as u16)
        }
        Op::Nop => Some(form(22, 0)),
        Op::Halt => Some(form(22, 1 << 8)),
        Op::It { cond, ref pattern } => {
            Some(form(22, 2 << 8 | cond.bits() << 4 | it_mask(pattern)))
        }
        _ => None,
    }
}

fn narrow_alu(op: AluOp, rd: Reg, rn: Reg, src: Operand) -> Option<u16> {
    match (op, src) {
        (AluOp::Add | AluOp::Sub, Operand::Imm(i)) => {
            let sub = (op == AluOp::Sub) as u32;
            if rd == rn && rd.is_low() && i <= 0xFF {
                Some(form(2 + sub, rd.bits() << 8 | i))
            } else if i <= 7 {
                Some(form(6, (2 + sub) << 9 | i << 6 | lo(rn)? << 3 | lo(rd)?))
            } else {
                None
            }
        }
        (AluOp::Add | AluOp::Sub, Operand::Reg(rm)) => {
            let sub = (op == AluOp::Sub) as u32;
            if let (Some(d), Some(n), Some(m)) = (lo(rd), lo(rn), lo(rm)) {
                Some(form(6, sub << 9 | m << 6 | n << 3 | d))
            } else if op == AluOp::Add && rd == rn {
                Some(form(21, 1 << 8 | rd.bits() << 4 | rm.bits()))
            } else {
                None
            }
        }
        (AluOp::Lsl | AluOp::Lsr, Operand::Imm(i)) if i <= 31 => {
            let top = if op == AluOp::Lsl { 4 } else { 5 };
            Some(form(top, i << 6 | lo(rn)? << 3 | lo(rd)?))
        }
        (_, Operand::Reg(rm)) if rd == rn => {
            let code = match op {
                AluOp::And => 0,
                AluOp::Orr => 1,
                AluOp::Eor => 2,
                AluOp::Lsl => 3,
                AluOp::Lsr => 4,
                _ => return None,
            };
            Some(form(20, code << 6 | lo(rm)? << 3 | lo(rd)?))
        }
        _ => None,
    }
}

fn narrow_mem(size: MemSize, store: bool, rt: Reg, rn: Reg, off: i32) -> Option<u16> {
    let t = lo(rt)?;
    if off < 0 {
        return None;
    }
    let off = off as u32;
    if size == MemSize::Word && (rn == Reg::SP || (rn == Reg::PC && !store)) {
        if !off.is_multiple_of(4) || off > 1020 {
            return None;
        }
        let top = match (rn == Reg::PC, store) {
            (true, _) => 13,
            (false, false) => 14,
            (false, true) => 15,
        };
        return Some(form(top, (t << 8) | (off / 4)));
    }
    let scale = size.bytes();
    if !off.is_multiple_of(scale) || off / scale > 31 {
        return None;
    }
    Some(form(
        7 + mem_index(size, store),
        (off / scale) << 6 | lo(rn)? << 3 | t,
    ))
}

fn it_mask(p: &ItPattern) -> u32 {
    // Slots 2..n occupy bits 3 downwards (1 = else), then a terminating 1.
    let mut mask = 0u32;
    for (i, s) in p.slots()[1..].iter().enumerate() {
        if *s == ItSlot::Else {
            mask |= 1 << (3 - i);
        }
    }
    mask | 1 << (4 - p.len())
}

fn it_pattern_from_mask(mask: u32) -> Option<ItPattern> {
    if mask & 0xF == 0 {
        return None;
    }
    let p = mask.trailing_zeros();
    let len = 4 - p as usize;
    let mut slots = vec![ItSlot::Then];
    for i in 0..len - 1 {
        slots.push(if mask & (1 << (3 - i)) != 0 {
            ItSlot::Else
        } else {
            ItSlot::Then
        });
    }
    ItPattern::new(slots)
}

fn wide30(op6: u32, payload: u32) -> u32 {
    debug_assert!(payload < 1 << 21);
    0b11110 << 27 | op6 << 21 | payload
}

fn wide29(op6: u32, payload: u32) -> u32 {
    debug_assert!(payload < 1 << 21);
    0b11101 << 27 | op6 << 21 | payload
}

fn bitfield_ok(lsb: u8, width: u8) -> bool {
    width >= 1 && lsb as u32 + width as u32 <= 32
}

/// The 32-bit form of `op`, if one exists.
pub fn wide_form(op: &Op) -> Option<u32> {
    let w = match *op {
        Op::Movw { rd, imm16 } => wide30(0, rd.bits() << 16 | imm16 as u32),
        Op::Movh { rd, imm16 } => wide30(1, rd.bits() << 16 | imm16 as u32),
        Op::Bfi { rd, rn, lsb, width } if bitfield_ok(lsb, width) => wide30(
            2,
            rd.bits() << 16 | rn.bits() << 12 | (lsb as u32) << 5 | (width as u32 - 1),
        ),
        Op::Bfc { rd, lsb, width } if bitfield_ok(lsb, width) => {
            wide30(3, rd.bits() << 16 | (lsb as u32) << 5 | (width as u32 - 1))
        }
        Op::Ubfx { rd, rn, lsb, width } if bitfield_ok(lsb, width) => wide30(
            4,
            rd.bits() << 16 | rn.bits() << 12 | (lsb as u32) << 5 | (width as u32 - 1),
        ),
        Op::Rbit { rd, rn } => wide30(5, rd.bits() << 16 | rn.bits() << 12),
        Op::Div { signed, rd, rn, rm } => wide30(
            6 + signed as u32,
            rd.bits() << 16 | rn.bits() << 12 | rm.bits() << 8,
        ),
        Op::Bl { offset } => {
            if offset % 2 != 0 || !fits_signed(offset / 2, 21) {
                return None;
            }
            wide30(8, ((offset / 2) as u32) & 0x1F_FFFF)
        }
        Op::Tb { rn, count } if count > 0 => wide30(9, rn.bits() << 16 | count as u32),
        Op::Alu {
            op,
            rd,
            rn,
            src: Operand::Reg(rm),
        } => wide30(
            10 + alu_index(op),
            rd.bits() << 16 | rn.bits() << 12 | rm.bits() << 8,
        ),
        Op::Mov {
            rd,
            src: Operand::Reg(rm),
        } => wide30(17, rd.bits() << 16 | rm.bits() << 8),
        Op::Cmp {
            rn,
            src: Operand::Reg(rm),
        } => wide30(18, rn.bits() << 12 | rm.bits() << 8),
        Op::Alu {
            op,
            rd,
            rn,
            src: Operand::Imm(i),
        } if i <= 0xFFF => wide30(19 + alu_index(op), rd.bits() << 16 | rn.bits() << 12 | i),
        Op::Mov {
            rd,
            src: Operand::Imm(i),
        } if i <= 0xFFF => wide30(26, rd.bits() << 16 | i),
        Op::Cmp {
            rn,
            src: Operand::Imm(i),
        } if i <= 0xFFF => wide30(27, rn.bits() << 12 | i),
        Op::Ldm {
            rn,
            list,
            writeback,
        } => wide30(
            28,
            (writeback as u32) << 20 | rn.bits() << 16 | list.mask() as u32,
        ),
        Op::Stm {
            rn,
            list,
            writeback,
        } => wide30(
            29,
            (writeback as u32) << 20 | rn.bits() << 16 | list.mask() as u32,
        ),
        Op::Load {
            size,
            rt,
            rn,
            offset,
        } => wide_mem(size, false, rt, rn, offset)?,
        Op::Store {
            size,
            rt,
            rn,
            offset,
        } => wide_mem(size, true, rt, rn, offset)?,
        Op::B { cond, offset } => {
            if offset % 2 != 0 || !fits_signed(offset / 2, 23) {
                return None;
            }
            0b11111 << 27 | cond.bits() << 23 | ((offset / 2) as u32 & 0x7F_FFFF)
        }
        _ => return None,
    };
    Some(w)
}

fn wide_mem(size: MemSize, store: bool, rt: Reg, rn: Reg, offset: Offset) -> Option<u32> {
    let idx = mem_index(size, store);
    match offset {
        Offset::Imm(off) => {
            if off.unsigned_abs() > 0xFFF {
                return None;
            }
            let u = (off >= 0) as u32;
            Some(wide29(
                idx,
                u << 20 | rt.bits() << 16 | rn.bits() << 12 | off.unsigned_abs(),
            ))
        }
        Offset::Reg(rm) => Some(wide29(
            6 + idx,
            rt.bits() << 16 | rn.bits() << 12 | rm.bits() << 8,
        )),
    }
}

/// Encodes at the width recorded in the instruction.
pub fn encode(inst: &Instruction) -> Result<Encoded, EncodeError> {
    let e = match inst.width {
        Width::Narrow => narrow_form(&inst.op).map(Encoded::Narrow),
        Width::Wide => wide_form(&inst.op).map(Encoded::Wide),
    };
    e.ok_or_else(|| EncodeError::NoForm(inst.op.to_string()))
}

/// Encodes at the narrowest available width.
pub fn encode_best(op: &Op) -> Result<Encoded, EncodeError> {
    narrow_form(op)
        .map(Encoded::Narrow)
        .or_else(|| wide_form(op).map(Encoded::Wide))
        .ok_or_else(|| EncodeError::NoForm(op.to_string()))
}

fn r(bits: u32) -> Reg {
    Reg::r((bits & 0xF) as u8)
}

fn sext(v: u32, bits: u32) -> i32 {
    let shift = 32 - bits;
    ((v << shift) as i32) >> shift
}

pub fn decode_narrow(h: u16) -> Result<Instruction, DecodeError> {
    let h = h as u32;
    let und = DecodeError::Undefined(h);
    let top5 = h >> 11;
    let rd3 = r(h & 7);
    let rn3 = r((h >> 3) & 7);
    let r8 = r((h >> 8) & 7);
    let imm8 = h & 0xFF;
    let op = match top5 {
        0 => Op::Mov {
            rd: r8,
            src: Operand::Imm(imm8),
        },
        1 => Op::Cmp {
            rn: r8,
            src: Operand::Imm(imm8),
        },
        2 | 3 => Op::Alu {
            op: if top5 == 2 { AluOp::Add } else { AluOp::Sub },
            rd: r8,
            rn: r8,
            src: Operand::Imm(imm8),
        },
        4 | 5 => Op::Alu {
            op: if top5 == 4 { AluOp::Lsl } else { AluOp::Lsr },
            rd: rd3,
            rn: rn3,
            src: Operand::Imm((h >> 6) & 0x1F),
        },
        6 => {
            let sel = (h >> 9) & 3;
            let field = (h >> 6) & 7;
            Op::Alu {
                op: if sel & 1 == 0 { AluOp::Add } else { AluOp::Sub },
                rd: rd3,
                rn: rn3,
                src: if sel >= 2 {
                    Operand::Imm(field)
                } else {
                    Operand::Reg(r(field))
                },
            }
        }
        7..=12 => {
            let (size, store) = mem_from_index(top5 - 7);
            let offset = Offset::Imm((((h >> 6) & 0x1F) * size.bytes()) as i32);
            if store {
                Op::Store {
                    size,
                    rt: rd3,
                    rn: rn3,
                    offset,
                }
            } else {
                Op::Load {
                    size,
                    rt: rd3,
                    rn: rn3,
                    offset,
                }
            }
        }
        13..=15 => {
            let offset = Offset::Imm((imm8 * 4) as i32);
            match top5 {
                13 => Op::Load {
                    size: MemSize::Word,
                    rt: r8,
                    rn: Reg::PC,
                    offset,
                },
                14 => Op::Load {
                    size: MemSize::Word,
                    rt: r8,
                    rn: Reg::SP,
                    offset,
                },
                _ => Op::Store {
                    size: MemSize::Word,
                    rt: r8,
                    rn: Reg::SP,
                    offset,
                },
            }
        }
        16..=19 => {
            let list = RegList::new(imm8 as u16).ok_or(und)?;
            let writeback = top5 % 2 == 1;
            if top5 < 18 {
                Op::Ldm {
                    rn: r8,
                    list,
                    writeback,
                }
            } else {
                Op::Stm {
                    rn: r8,
                    list,
                    writeback,
                }
            }
        }
        20 => {
            if h & (1 << 10) != 0 {
                return Err(und);
            }
            let src = Operand::Reg(rn3);
            match (h >> 6) & 0xF {
                0 => Op::Alu {
                    op: AluOp::And,
                    rd: rd3,
                    rn: rd3,
                    src,
                },
                1 => Op::Alu {
                    op: AluOp::Orr,
                    rd: rd3,
                    rn: rd3,
                    src,
                },
                2 => Op::Alu {
                    op: AluOp::Eor,
                    rd: rd3,
                    rn: rd3,
                    src,
                },
                3 => Op::Alu {
                    op: AluOp::Lsl,
                    rd: rd3,
                    rn: rd3,
                    src,
                },
                4 => Op::Alu {
                    op: AluOp::Lsr,
                    rd: rd3,
                    rn: rd3,
                    src,
                },
                5 => Op::Mov { rd: rd3, src },
                6 => Op::Cmp { rn: rd3, src },
                _ => return Err(und),
            }
        }
        21 => {
            let rd = r(h >> 4);
            let rm = r(h);
            match (h >> 8) & 7 {
                0 => Op::Mov {
                    rd,
                    src: Operand::Reg(rm),
                },
                1 => Op::Alu {
                    op: AluOp::Add,
                    rd,
                    rn: rd,
                    src: Operand::Reg(rm),
                },
                2 => Op::Cmp {
                    rn: rd,
                    src: Operand::Reg(rm),
                },
                _ => return Err(und),
            }
        }
        22 => match (h >> 8) & 7 {
            0 if imm8 == 0 => Op::Nop,
            1 if imm8 == 0 => Op::Halt,
            2 => {
                let cond = Cond::from_bits((h >> 4) & 0xF).ok_or(und)?;
                let pattern = it_pattern_from_mask(h & 0xF).ok_or(und)?;
                if cond == Cond::Al && pattern.else_mask() != 0 {
                    return Err(und);
                }
                Op::It { cond, pattern }
            }
            _ => return Err(und),
        },
        26 | 27 => Op::B {
            cond: Cond::from_bits((h >> 8) & 0xF).ok_or(und)?,
            offset: sext(imm8, 8) * 2,
        },
        _ => return Err(und),
    };
    Ok(Instruction {
        op,
        width: Width::Narrow,
    })
}

pub fn decode_wide(w: u32) -> Result<Instruction, DecodeError> {
    let und = DecodeError::Undefined(w);
    let prefix = w >> 27;
    let op6 = (w >> 21) & 0x3F;
    let p = w & 0x1F_FFFF;
    let rd = r(p >> 16);
    let rn = r(p >> 12);
    let rm = r(p >> 8);
    let lsb = ((p >> 5) & 0x1F) as u8;
    let width = ((p & 0x1F) + 1) as u8;
    let op = match prefix {
        0b11111 => Op::B {
            cond: Cond::from_bits((w >> 23) & 0xF).ok_or(und)?,
            offset: sext(w & 0x7F_FFFF, 23) * 2,
        },
        0b11110 => match op6 {
            0 => Op::Movw {
                rd,
                imm16: p as u16,
            },
            1 => Op::Movh {
                rd,
                imm16: p as u16,
            },
            2 | 4 if lsb as u32 + width as u32 > 32 => return Err(und),
            2 => Op::Bfi { rd, rn, lsb, width },
            3 if lsb as u32 + width as u32 > 32 => return Err(und),
            3 => Op::Bfc { rd, lsb, width },
            4 => Op::Ubfx { rd, rn, lsb, width },
            5 => Op::Rbit { rd, rn },
            6 | 7 => Op::Div {
                signed: op6 == 7,
                rd,
                rn,
                rm,
            },
            8 => Op::Bl {
                offset: sext(p, 21) * 2,
            },
            9 => {
                let count = p as u16;
                if count == 0 {
                    return Err(und);
                }
                Op::Tb { rn: rd, count }
            }
            10..=16 => Op::Alu {
                op: ALU_OPS[(op6 - 10) as usize],
                rd,
                rn,
                src: Operand::Reg(rm),
            },
            17 => Op::Mov {
                rd,
                src: Operand::Reg(rm),
            },
            18 => Op::Cmp {
                rn,
                src: Operand::Reg(rm),
            },
            19..=25 => Op::Alu {
                op: ALU_OPS[(op6 - 19) as usize],
                rd,
                rn,
                src: Operand::Imm(p & 0xFFF),
            },
            26 => Op::Mov {
                rd,
                src: Operand::Imm(p & 0xFFF),
            },
            27 => Op::Cmp {
                rn,
                src: Operand::Imm(p & 0xFFF),
            },
            28 | 29 => {
                let list = RegList::new(p as u16).ok_or(und)?;
                let writeback = p >> 20 & 1 == 1;
                if op6 == 28 {
                    Op::Ldm {
                        rn: rd,
                        list,
                        writeback,
                    }
                } else {
                    Op::Stm {
                        rn: rd,
                        list,
                        writeback,
                    }
                }
            }
            _ => return Err(und),
        },
        0b11101 => {
            let (idx, offset) = match op6 {
                0..=5 => {
                    let mag = (p & 0xFFF) as i32;
                    (op6, Offset::Imm(if p >> 20 & 1 == 1 { mag } else { -mag }))
                }
                6..=11 => (op6 - 6, Offset::Reg(rm)),
                _ => return Err(und),
            };
            let (size, store) = mem_from_index(idx);
            if store {
                Op::Store {
                    size,
                    rt: rd,
                    rn,
                    offset,
                }
            } else {
                Op::Load {
                    size,
                    rt: rd,
                    rn,
                    offset,
                }
            }
        }
        _ => return Err(und),
    };
    Ok(Instruction {
        op,
        width: Width::Wide,
    })
}

/// Decodes from the first halfword and, for 32-bit forms, the second.
pub fn decode(h1: u16, h2: Option<u16>) -> Result<Instruction, DecodeError> {
    if is_wide_prefix(h1) {
        let h2 = h2.ok_or(DecodeError::Undefined(h1 as u32))?;
        decode_wide((h1 as u32) << 16 | h2 as u32)
    } else {
        decode_narrow(h1)
    }
}
