//! Region-based memory protection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REGION_COUNT: usize = 8;
pub const MIN_REGION_SIZE: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Read,
    Write,
    Execute,
}

/// Read/write/execute permission set, written as a string such as `"rw"`
/// or `"rx"` in configuration documents (`""` or `"-"` for none).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Rwx {
    pub read: bool,
    pub write: bool,
    pub execute: bool,
}

impl Rwx {
    pub const NONE: Rwx = Rwx {
        read: false,
        write: false,
        execute: false,
    };
    pub const RW: Rwx = Rwx {
        read: true,
        write: true,
        execute: false,
    };
    pub const RX: Rwx = Rwx {
        read: true,
        write: false,
        execute: true,
    };
    pub const RWX: Rwx = Rwx {
        read: true,
        write: true,
        execute: true,
    };

    pub fn allows(self, kind: AccessKind) -> bool {
        match kind {
            AccessKind::Read => self.read,
            AccessKind::Write => self.write,
            AccessKind::Execute => self.execute,
        }
    }

    fn bits(self) -> u32 {
        self.read as u32 | (self.write as u32) << 1 | (self.execute as u32) << 2
    }

    fn from_bits(b: u32) -> Rwx {
        Rwx {
            read: b & 1 != 0,
            write: b & 2 != 0,
            execute: b & 4 != 0,
        }
    }
}

impl TryFrom<String> for Rwx {
    type Error = String;

    fn try_from(s: String) -> Result<Rwx, String> {
        let mut p = Rwx::NONE;
        for ch in s.chars() {
            match ch.to_ascii_lowercase() {
                'r' if !p.read => p.read = true,
                'w' if !p.write => p.write = true,
                'x' if !p.execute => p.execute = true,
                '-' => {}
                _ => return Err(format!("bad permission string `{s}` (use letters r, w, x)")),
            }
        }
        Ok(p)
    }
}

impl From<Rwx> for String {
    fn from(p: Rwx) -> String {
        let mut s = String::new();
        for (on, ch) in [(p.read, 'r'), (p.write, 'w'), (p.execute, 'x')] {
            if on {
                s.push(ch);
            }
        }
        if s.is_empty() {
            s.push('-');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Perms {
    pub privileged: Rwx,
    pub unprivileged: Rwx,
}

impl Perms {
    pub fn for_level(&self, privileged: bool) -> Rwx {
        if privileged {
            self.privileged
        } else {
            self.unprivileged
        }
    }
}

/// `size` is a power of two from 32 bytes to 4 GiB; `base` is aligned to it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpuRegion {
    pub base: u32,
    pub size: u64,
    #[serde(default)]
    pub perms: Perms,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

impl MpuRegion {
    pub fn new(base: u32, size: u64, perms: Perms) -> MpuRegion {
        MpuRegion {
            base,
            size,
            perms,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<(), MpuError> {
        if !self.size.is_power_of_two() || self.size < MIN_REGION_SIZE || self.size > 1 << 32 {
            return Err(MpuError::BadSize(self.size));
        }
        if !(self.base as u64).is_multiple_of(self.size) {
            return Err(MpuError::Misaligned {
                base: self.base,
                size: self.size,
            });
        }
        Ok(())
    }

    pub fn contains(&self, addr: u32) -> bool {
        (addr as u64).wrapping_sub(self.base as u64) < self.size && addr >= self.base
    }

    /// Packs permissions and size the way the region attribute register
    /// presents them: bit 0 enable, bits 5:1 `log2(size) - 1`, bits 10:8
    /// privileged RWX, bits 13:11 unprivileged RWX.
    pub fn attr_bits(&self) -> u32 {
        let log2 = self.size.trailing_zeros();
        self.enabled as u32
            | (log2 - 1) << 1
            | self.perms.privileged.bits() << 8
            | self.perms.unprivileged.bits() << 11
    }

    pub fn from_registers(base: u32, attr: u32) -> MpuRegion {
        MpuRegion {
            base,
            size: 1u64 << (((attr >> 1) & 0x1F) + 1),
            perms: Perms {
                privileged: Rwx::from_bits(attr >> 8),
                unprivileged: Rwx::from_bits(attr >> 11),
            },
            enabled: attr & 1 != 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    NoRegion,
    PermDenied,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Fault(DenyReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MpuError {
    #[error("region index {0} out of range")]
    NoSuchRegion(usize),
    #[error("region size {0:#x} must be a power of two between 32 bytes and 4 GiB")]
    BadSize(u64),
    #[error("region base {base:#010x} not aligned to size {size:#x}")]
    Misaligned { base: u32, size: u64 },
    #[error("unprivileged code may not configure the MPU")]
    Unprivileged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MpuConfig {
    pub enabled: bool,
    pub background_privileged_allowed: bool,
    pub regions: [Option<MpuRegion>; REGION_COUNT],
}

impl MpuConfig {
    pub fn configure_region(
        &mut self,
        index: usize,
        region: Option<MpuRegion>,
        privileged_caller: bool,
    ) -> Result<(), MpuError> {
        if !privileged_caller {
            return Err(MpuError::Unprivileged);
        }
        if index >= REGION_COUNT {
            return Err(MpuError::NoSuchRegion(index));
        }
        if let Some(r) = &region {
            r.validate()?;
        }
        self.regions[index] = region;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), MpuError> {
        self.regions.iter().flatten().try_for_each(|r| r.validate())
    }

    /// Highest-indexed enabled region containing `addr`.
    pub fn region_for(&self, addr: u32) -> Option<(usize, &MpuRegion)> {
        self.regions
            .iter()
            .enumerate()
            .rev()
            .filter_map(|(i, r)| r.as_ref().map(|r| (i, r)))
            .find(|(_, r)| r.enabled && r.contains(addr))
    }

    pub fn check_access(&self, addr: u32, kind: AccessKind, privileged: bool) -> Decision {
        if !self.enabled {
            return Decision::Allow;
        }
        match self.region_for(addr) {
            Some((_, r)) => {
                if r.perms.for_level(privileged).allows(kind) {
                    Decision::Allow
                } else {
                    Decision::Fault(DenyReason::PermDenied)
                }
            }
            None if privileged && self.background_privileged_allowed => Decision::Allow,
            None => Decision::Fault(DenyReason::NoRegion),
        }
    }
}

/// One region slot as written in a configuration document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSetting {
    pub index: usize,
    pub base: u32,
    pub size: u64,
    #[serde(default)]
    pub privileged: Rwx,
    #[serde(default)]
    pub unprivileged: Rwx,
    #[serde(default = "yes")]
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpuSettings {
    pub enabled: bool,
    pub background_privileged_allowed: bool,
    pub regions: Vec<RegionSetting>,
}

impl MpuSettings {
    pub fn build(&self) -> Result<MpuConfig, MpuError> {
        let mut c = MpuConfig {
            enabled: self.enabled,
            background_privileged_allowed: self.background_privileged_allowed,
            ..MpuConfig::default()
        };
        for r in &self.regions {
            let region = MpuRegion {
                base: r.base,
                size: r.size,
                perms: Perms {
                    privileged: r.privileged,
                    unprivileged: r.unprivileged,
                },
                enabled: r.enabled,
            };
            c.configure_region(r.index, Some(region), true)?;
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn user_rw() -> Perms {
        Perms {
            privileged: Rwx::RW,
            unprivileged: Rwx::RW,
        }
    }

    fn enabled_with(regions: &[(usize, MpuRegion)]) -> MpuConfig {
        let mut c = MpuConfig {
            enabled: true,
            ..MpuConfig::default()
        };
        for (i, r) in regions {
            c.configure_region(*i, Some(*r), true).unwrap();
        }
        c
    }

    #[test]
    fn disabled_allows_everything() {
        let c = MpuConfig::default();
        assert_eq!(
            c.check_access(0xDEAD_BEEC, AccessKind::Write, false),
            Decision::Allow
        );
    }

    #[test]
    fn region_end_is_exclusive() {
        let c = enabled_with(&[(0, MpuRegion::new(0x2000_0000, 64, user_rw()))]);
        assert_eq!(
            c.check_access(0x2000_003F, AccessKind::Write, false),
            Decision::Allow
        );
        assert_eq!(
            c.check_access(0x2000_0040, AccessKind::Write, false),
            Decision::Fault(DenyReason::NoRegion)
        );
    }

    #[test]
    fn adjacent_task_regions_isolate() {
        let a = MpuRegion::new(0x2000_0000, 128, user_rw());
        let b = MpuRegion::new(0x2000_0080, 128, user_rw());
        let only_a = enabled_with(&[(1, a)]);
        let only_b = enabled_with(&[(1, b)]);
        for off in (0..256).step_by(4) {
            let addr = 0x2000_0000 + off;
            let in_a = off < 128;
            assert_eq!(
                only_a.check_access(addr, AccessKind::Write, false) == Decision::Allow,
                in_a
            );
            assert_eq!(
                only_b.check_access(addr, AccessKind::Write, false) == Decision::Allow,
                !in_a
            );
        }
    }

    #[test]
    fn configuration_rules() {
        let mut c = MpuConfig::default();
        assert!(c
            .configure_region(0, Some(MpuRegion::new(0x2000_0000, 32, user_rw())), true)
            .is_ok());
        assert!(matches!(
            c.configure_region(0, Some(MpuRegion::new(0x2000_0010, 32, user_rw())), true),
            Err(MpuError::Misaligned { .. })
        ));
        assert!(matches!(
            c.configure_region(0, Some(MpuRegion::new(0, 48, user_rw())), true),
            Err(MpuError::BadSize(48))
        ));
        assert_eq!(
            c.configure_region(0, Some(MpuRegion::new(0x2000_0000, 32, user_rw())), false),
            Err(MpuError::Unprivileged)
        );
        assert_eq!(
            c.configure_region(8, None, true),
            Err(MpuError::NoSuchRegion(8))
        );
    }

    #[test]
    fn minimum_granularity_is_below_4k() {
        const { assert!(MIN_REGION_SIZE < 4096) };
        assert!(MpuRegion::new(0x40, MIN_REGION_SIZE, Perms::default())
            .validate()
            .is_ok());
        assert!(MpuRegion::new(0x40, MIN_REGION_SIZE / 2, Perms::default())
            .validate()
            .is_err());
    }

    #[test]
    fn whole_address_space_region() {
        let c = enabled_with(&[(0, MpuRegion::new(0, 1 << 32, user_rw()))]);
        assert_eq!(
            c.check_access(u32::MAX, AccessKind::Read, false),
            Decision::Allow
        );
    }

    #[test]
    fn background_policy_only_for_privileged() {
        let mut c = enabled_with(&[]);
        c.background_privileged_allowed = true;
        assert_eq!(
            c.check_access(0x100, AccessKind::Read, true),
            Decision::Allow
        );
        assert_eq!(
            c.check_access(0x100, AccessKind::Read, false),
            Decision::Fault(DenyReason::NoRegion)
        );
    }

    #[test]
    fn permission_strings() {
        assert_eq!(Rwx::try_from("rw".to_string()), Ok(Rwx::RW));
        assert_eq!(Rwx::try_from("-".to_string()), Ok(Rwx::NONE));
        assert!(Rwx::try_from("rr".to_string()).is_err());
        assert_eq!(String::from(Rwx::RX), "rx");
        let s: MpuSettings = toml::from_str(
            "enabled = true\n[[regions]]\nindex = 2\nbase = 0x20000000\nsize = 128\nunprivileged = \"rw\"\n",
        )
        .unwrap();
        let c = s.build().unwrap();
        assert_eq!(c.regions[2].unwrap().perms.unprivileged, Rwx::RW);
    }

    #[test]
    fn attribute_register_round_trip() {
        let r = MpuRegion::new(
            0x2000_0080,
            128,
            Perms {
                privileged: Rwx::RWX,
                unprivileged: Rwx::RW,
            },
        );
        assert_eq!(MpuRegion::from_registers(r.base, r.attr_bits()), r);
    }

    fn rwx() -> impl Strategy<Value = Rwx> {
        (any::<bool>(), any::<bool>(), any::<bool>()).prop_map(|(read, write, execute)| Rwx {
            read,
            write,
            execute,
        })
    }

    fn kind() -> impl Strategy<Value = AccessKind> {
        prop_oneof![
            Just(AccessKind::Read),
            Just(AccessKind::Write),
            Just(AccessKind::Execute)
        ]
    }

    proptest! {
        #[test]
        fn overlap_follows_highest_index(
            lo_idx in 0usize..7, gap in 1usize..8,
            p0 in rwx(), p1 in rwx(), u0 in rwx(), u1 in rwx(),
            small_log in 5u32..10, off in 0u32..1024, k in kind(), privileged: bool,
        ) {
            let hi_idx = (lo_idx + gap).min(7);
            prop_assume!(hi_idx != lo_idx);
            let big = MpuRegion::new(0x2000_0000, 1024, Perms { privileged: p0, unprivileged: u0 });
            let small = MpuRegion::new(0x2000_0000, 1 << small_log, Perms { privileged: p1, unprivileged: u1 });
            let addr = 0x2000_0000 + off;
            for (first, second) in [(big, small), (small, big)] {
                let c = enabled_with(&[(lo_idx, first), (hi_idx, second)]);
                let winner = if second.contains(addr) { second } else { first };
                let expect = if winner.perms.for_level(privileged).allows(k) {
                    Decision::Allow
                } else {
                    Decision::Fault(DenyReason::PermDenied)
                };
                prop_assert_eq!(c.check_access(addr, k, privileged), expect);
            }
        }

        #[test]
        fn check_is_pure(addr: u32, k in kind(), privileged: bool) {
            let c = enabled_with(&[(3, MpuRegion::new(0x2000_0000, 4096, user_rw()))]);
            prop_assert_eq!(c.check_access(addr, k, privileged), c.check_access(addr, k, privileged));
        }
    }
}
