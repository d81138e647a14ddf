/// Largest bit-band target span.
pub const MAX_TARGET_BYTES: u32 = 1 << 20;
/// Alias bytes per target byte: one alias byte per target bit.
pub const ALIAS_RATIO: u32 = 8;

/// A target region whose bits are each mirrored by one byte of the alias
/// region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitBand {
    pub target_base: u32,
    pub target_len: u32,
    pub alias_base: u32,
}

impl BitBand {
    pub fn new(target_base: u32, target_len: u32, alias_base: u32) -> Result<BitBand, String> {
        if target_len == 0 || target_len > MAX_TARGET_BYTES {
            return Err(format!(
                "bit-band target length {target_len:#x} must be in 1..=1 MiB"
            ));
        }
        Ok(BitBand {
            target_base,
            target_len,
            alias_base,
        })
    }

    pub fn alias_len(&self) -> u32 {
        self.target_len * ALIAS_RATIO
    }

    pub fn in_alias(&self, addr: u32) -> bool {
        addr >= self.alias_base && addr - self.alias_base < self.alias_len()
    }

    /// Target byte address and bit index addressed by an alias address.
    pub fn translate(&self, addr: u32) -> Option<(u32, u8)> {
        if !self.in_alias(addr) {
            return None;
        }
        let off = addr - self.alias_base;
        Some((
            self.target_base + off / ALIAS_RATIO,
            (off % ALIAS_RATIO) as u8,
        ))
    }

    /// Alias address of `bit` within the target byte at `byte_addr`.
    pub fn alias_of(&self, byte_addr: u32, bit: u8) -> u32 {
        debug_assert!(bit < 8);
        self.alias_base + (byte_addr - self.target_base) * ALIAS_RATIO + bit as u32
    }
}

/// The single-bit merge performed by an alias write: bit 0 of `value`
/// decides set or clear, everything else is ignored.
pub fn merge_bit(byte: u8, bit: u8, value: u32) -> u8 {
    if value & 1 == 1 {
        byte | (1 << bit)
    } else {
        byte & !(1 << bit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band() -> BitBand {
        BitBand::new(0x2000_0000, MAX_TARGET_BYTES, 0x2200_0000).unwrap()
    }

    #[test]
    fn translation_examples() {
        let b = band();
        assert_eq!(b.translate(0x2200_0000), Some((0x2000_0000, 0)));
        assert_eq!(b.translate(0x2200_0803), Some((0x2000_0100, 3)));
        assert_eq!(
            b.translate(0x2200_0000 + 0x7F_FFFF),
            Some((0x2000_0000 + 0xF_FFFF, 7))
        );
        assert_eq!(b.translate(0x2200_0000 + 0x80_0000), None);
        assert_eq!(b.translate(0x21FF_FFFF), None);
    }

    #[test]
    fn one_mib_maps_to_eight_mib() {
        assert_eq!(band().alias_len(), 8 << 20);
        assert!(BitBand::new(0, MAX_TARGET_BYTES + 1, 0x100_0000).is_err());
    }

    #[test]
    fn alias_of_inverts_translate() {
        let b = BitBand::new(0x2000_0000, 0x400, 0x2200_0000).unwrap();
        for byte in [0x2000_0000u32, 0x2000_0100, 0x2000_03FF] {
            for bit in 0..8 {
                assert_eq!(b.translate(b.alias_of(byte, bit)), Some((byte, bit)));
            }
        }
    }

    #[test]
    fn merge_examples() {
        assert_eq!(merge_bit(0x00, 3, 1), 0x08);
        assert_eq!(merge_bit(0xFF, 0, 0), 0xFE);
        assert_eq!(merge_bit(0x00, 3, 0xFFFF_FFFE), 0x00);
    }
}
