use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FPB_ENTRIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpbMode {
    /// Reads of the matched flash word return `remap_value`.
    Remap,
    /// Fetching an instruction that starts at the matched address halts.
    Breakpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FpbEntry {
    pub match_address: u32,
    pub mode: FpbMode,
    pub remap_value: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FpbError {
    #[error("flash patch entry {0} out of range (8 entries)")]
    NoSuchEntry(usize),
    #[error("flash patch address {0:#010x} is not word aligned")]
    Unaligned(u32),
    #[error("flash patch address {0:#010x} is not in flash")]
    NotFlash(u32),
    #[error("flash patch address {0:#010x} already used by entry {1}")]
    Duplicate(u32, usize),
}

/// Flash patch and breakpoint unit.
#[derive(Debug, Clone, Default)]
pub struct FlashPatchUnit {
    entries: [Option<FpbEntry>; FPB_ENTRIES],
}

impl FlashPatchUnit {
    /// `in_flash` is decided by the caller, which owns the memory map.
    pub fn configure(
        &mut self,
        entry: usize,
        match_address: u32,
        mode: FpbMode,
        remap_value: u32,
        in_flash: bool,
    ) -> Result<(), FpbError> {
        if entry >= FPB_ENTRIES {
            return Err(FpbError::NoSuchEntry(entry));
        }
        if !match_address.is_multiple_of(4) {
            return Err(FpbError::Unaligned(match_address));
        }
        if !in_flash {
            return Err(FpbError::NotFlash(match_address));
        }
        if let Some(other) =
            self.entries.iter().enumerate().position(|(i, e)| {
                i != entry && e.is_some_and(|e| e.match_address == match_address)
            })
        {
            return Err(FpbError::Duplicate(match_address, other));
        }
        self.entries[entry] = Some(FpbEntry {
            match_address,
            mode,
            remap_value,
        });
        Ok(())
    }

    pub fn clear(&mut self, entry: usize) {
        if let Some(e) = self.entries.get_mut(entry) {
            *e = None;
        }
    }

    pub fn enabled_count(&self) -> usize {
        self.entries.iter().flatten().count()
    }

    pub fn breakpoint_at(&self, addr: u32) -> bool {
        self.entries
            .iter()
            .flatten()
            .any(|e| e.mode == FpbMode::Breakpoint && e.match_address == addr)
    }

    /// Remapped value of the word containing `addr`, if patched.
    pub fn remap_word(&self, addr: u32) -> Option<u32> {
        let word = addr & !3;
        self.entries
            .iter()
            .flatten()
            .find(|e| e.mode == FpbMode::Remap && e.match_address == word)
            .map(|e| e.remap_value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_entries_then_rejection() {
        let mut fpb = FlashPatchUnit::default();
        for i in 0..8 {
            fpb.configure(i, 0x100 + 8 * i as u32, FpbMode::Breakpoint, 0, true)
                .unwrap();
        }
        assert_eq!(fpb.enabled_count(), 8);
        assert_eq!(
            fpb.configure(8, 0x400, FpbMode::Breakpoint, 0, true),
            Err(FpbError::NoSuchEntry(8))
        );
        // Grouped together is fine: adjacent words.
        let mut g = FlashPatchUnit::default();
        g.configure(0, 0x200, FpbMode::Breakpoint, 0, true).unwrap();
        g.configure(1, 0x204, FpbMode::Breakpoint, 0, true).unwrap();
    }

    #[test]
    fn rejects_bad_addresses() {
        let mut fpb = FlashPatchUnit::default();
        assert!(matches!(
            fpb.configure(0, 0x102, FpbMode::Remap, 0, true),
            Err(FpbError::Unaligned(_))
        ));
        assert!(matches!(
            fpb.configure(0, 0x2000_0000, FpbMode::Remap, 0, false),
            Err(FpbError::NotFlash(_))
        ));
        fpb.configure(0, 0x100, FpbMode::Remap, 7, true).unwrap();
        assert!(matches!(
            fpb.configure(1, 0x100, FpbMode::Breakpoint, 0, true),
            Err(FpbError::Duplicate(0x100, 0))
        ));
        // Reconfiguring the same entry is not a duplicate.
        fpb.configure(0, 0x100, FpbMode::Remap, 9, true).unwrap();
        assert_eq!(fpb.remap_word(0x102), Some(9));
    }
}
