use super::{Cond, Flags};

pub fn eval_cond(cond: Cond, f: Flags) -> bool {
    match cond {
        Cond::Eq => f.z,
        Cond::Ne => !f.z,
        Cond::Cs => f.c,
        Cond::Cc => !f.c,
        Cond::Mi => f.n,
        Cond::Pl => !f.n,
        Cond::Vs => f.v,
        Cond::Vc => !f.v,
        Cond::Hi => f.c && !f.z,
        Cond::Ls => !f.c || f.z,
        Cond::Ge => f.n == f.v,
        Cond::Lt => f.n != f.v,
        Cond::Gt => !f.z && f.n == f.v,
        Cond::Le => f.z || f.n != f.v,
        Cond::Al => true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitfieldKind {
    Insert,
    Clear,
    ExtractUnsigned,
}

fn field_mask(width: u32) -> u32 {
    if width >= 32 {
        u32::MAX
    } else {
        (1u32 << width) - 1
    }
}

/// BFI / BFC / UBFX. The caller guarantees `1 <= width` and
/// `lsb + width <= 32`; the assembler rejects anything else.
pub fn exec_bitfield(kind: BitfieldKind, rd_old: u32, rn: u32, lsb: u32, width: u32) -> u32 {
    debug_assert!(width >= 1 && lsb + width <= 32);
    let mask = field_mask(width);
    match kind {
        BitfieldKind::Insert => (rd_old & !(mask << lsb)) | ((rn & mask) << lsb),
        BitfieldKind::Clear => rd_old & !(mask << lsb),
        BitfieldKind::ExtractUnsigned => (rn >> lsb) & mask,
    }
}

pub fn exec_rbit(rn: u32) -> u32 {
    rn.reverse_bits()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DivideOutcome {
    pub quotient: u32,
    pub divide_by_zero: bool,
}

/// Truncating division. A zero divisor yields 0 and is flagged so the
/// caller can log it; `i32::MIN / -1` wraps to `i32::MIN`.
pub fn exec_divide(signed: bool, rn: u32, rm: u32) -> DivideOutcome {
    if rm == 0 {
        return DivideOutcome {
            quotient: 0,
            divide_by_zero: true,
        };
    }
    let quotient = if signed {
        (rn as i32).wrapping_div(rm as i32) as u32
    } else {
        rn / rm
    };
    DivideOutcome {
        quotient,
        divide_by_zero: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HalfMove {
    /// Zero-extends into the register.
    Low,
    /// Writes the top half, keeping the low half.
    High,
}

pub fn exec_mov_halves(kind: HalfMove, rd_old: u32, imm16: u16) -> u32 {
    match kind {
        HalfMove::Low => imm16 as u32,
        HalfMove::High => ((imm16 as u32) << 16) | (rd_old & 0xFFFF),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn condition_definitions() {
        let z = Flags {
            z: true,
            ..Flags::default()
        };
        assert!(eval_cond(Cond::Eq, z));
        assert!(!eval_cond(Cond::Eq, Flags::default()));
        assert!(eval_cond(Cond::Gt, Flags::default()));
        for bits in 0..16 {
            assert!(eval_cond(Cond::Al, Flags::from_nzcv(bits)));
        }
    }

    #[test]
    fn inverse_conditions_are_complementary() {
        for bits in 0..16 {
            let f = Flags::from_nzcv(bits);
            for c in Cond::ALL.iter().filter(|c| **c != Cond::Al) {
                assert_ne!(eval_cond(*c, f), eval_cond(c.invert().unwrap(), f));
            }
        }
    }

    #[test]
    fn bitfield_examples() {
        assert_eq!(
            exec_bitfield(BitfieldKind::Insert, 0xFFFF_FFFF, 0, 8, 8),
            0xFFFF_00FF
        );
        assert_eq!(exec_bitfield(BitfieldKind::Clear, 0xFFFF_FFFF, 0, 0, 32), 0);
        assert_eq!(
            exec_bitfield(BitfieldKind::ExtractUnsigned, 0, 0x1234_5678, 12, 8),
            0x45
        );
        assert_eq!(
            exec_bitfield(BitfieldKind::Insert, 0, 0xABCD_EF01, 0, 32),
            0xABCD_EF01
        );
    }

    #[test]
    fn rbit_examples() {
        assert_eq!(exec_rbit(0), 0);
        assert_eq!(exec_rbit(1), 0x8000_0000);
        // Per-bit loop oracle, evaluated by hand: 0x12345678 reversed.
        assert_eq!(exec_rbit(0x1234_5678), 0x1E6A_2C48);
    }

    #[test]
    fn divide_examples() {
        assert_eq!(exec_divide(false, 100, 7).quotient, 14);
        assert_eq!(exec_divide(true, (-7i32) as u32, 2).quotient as i32, -3);
        let z = exec_divide(false, 55, 0);
        assert_eq!(z.quotient, 0);
        assert!(z.divide_by_zero);
        assert_eq!(
            exec_divide(true, i32::MIN as u32, (-1i32) as u32).quotient,
            i32::MIN as u32
        );
    }

    #[test]
    fn half_moves() {
        assert_eq!(exec_mov_halves(HalfMove::Low, 0xDEAD_BEEF, 0x1234), 0x1234);
        assert_eq!(
            exec_mov_halves(HalfMove::High, 0x0000_1234, 0x5678),
            0x5678_1234
        );
    }

    fn field() -> impl Strategy<Value = (u32, u32)> {
        (1u32..=32).prop_flat_map(|w| (0..=32 - w, Just(w)))
    }

    #[test]
    fn movw_then_movh_builds_any_constant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let c: u32 = rng.gen();
            let lo = exec_mov_halves(HalfMove::Low, rng.gen(), c as u16);
            assert_eq!(exec_mov_halves(HalfMove::High, lo, (c >> 16) as u16), c);
        }
    }

    proptest! {
        #[test]
        fn rbit_is_an_involution(x: u32) {
            prop_assert_eq!(exec_rbit(exec_rbit(x)), x);
        }

        #[test]
        fn clear_is_insert_of_zero(x: u32, (lsb, w) in field()) {
            prop_assert_eq!(
                exec_bitfield(BitfieldKind::Clear, x, 0xFFFF_FFFF, lsb, w),
                exec_bitfield(BitfieldKind::Insert, x, 0, lsb, w)
            );
        }

        #[test]
        fn extract_undoes_insert(v: u32, (lsb, w) in field()) {
            let inserted = exec_bitfield(BitfieldKind::Insert, 0, v, lsb, w);
            let mask = if w == 32 { u32::MAX } else { (1 << w) - 1 };
            prop_assert_eq!(
                exec_bitfield(BitfieldKind::ExtractUnsigned, 0, inserted, lsb, w),
                v & mask
            );
        }

        #[test]
        fn division_truncates_like_the_host(a: u32, b in 1u32..) {
            prop_assert_eq!(exec_divide(false, a, b).quotient, a / b);
            let (sa, sb) = (a as i32 as i64, b as i32 as i64);
            prop_assert_eq!(exec_divide(true, a, b).quotient, (sa / sb) as u32);
        }
    }
}
