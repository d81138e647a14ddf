//! Memory map and memory-system timing: flash streaming, bit-band
//! aliasing, direct-mapped caches and TCM with soft-error recovery, and the
//! flash patch unit.

pub mod bitband;
pub mod cache;
pub mod flash;
pub mod fpb;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::isa::{encoding::is_wide_prefix, MemSize};
use bitband::BitBand;
use cache::{line_base, Cache, CacheConfig, Lookup, LINE_BYTES, LINE_WORDS, TAG_BITS};
use flash::{FlashModel, FlashTiming};
use fpb::{FlashPatchUnit, FpbError, FpbMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    Flash,
    Ram,
    Tcm,
    BitbandTarget,
    BitbandAlias,
    Device,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionDescriptor {
    pub name: String,
    pub base: u32,
    pub length: u32,
    pub kind: RegionKind,
    /// Defaults to false for flash, true otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub writable: Option<bool>,
    /// Defaults to true for flash, ram and tcm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub executable: Option<bool>,
    /// Route accesses through the instruction/data caches, when present.
    #[serde(default)]
    pub cached: bool,
    /// Cycles per access for non-flash regions; backing cost for cached ones.
    #[serde(default = "one")]
    pub access_cycles: u32,
}

impl RegionDescriptor {
    pub fn new(name: &str, kind: RegionKind, base: u32, length: u32) -> RegionDescriptor {
        RegionDescriptor {
            name: name.to_string(),
            base,
            length,
            kind,
            writable: None,
            executable: None,
            cached: false,
            access_cycles: 1,
        }
    }

    pub fn cached(mut self) -> Self {
        self.cached = true;
        self
    }

    pub fn end(&self) -> u64 {
        self.base as u64 + self.length as u64
    }

    pub fn contains(&self, addr: u32) -> bool {
        (addr as u64) >= self.base as u64 && (addr as u64) < self.end()
    }

    pub fn is_writable(&self) -> bool {
        self.writable.unwrap_or(self.kind != RegionKind::Flash)
    }

    pub fn is_executable(&self) -> bool {
        self.executable.unwrap_or(matches!(
            self.kind,
            RegionKind::Flash | RegionKind::Ram | RegionKind::Tcm
        ))
    }
}

fn default_repair() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    pub regions: Vec<RegionDescriptor>,
    #[serde(default)]
    pub flash: FlashTiming,
    #[serde(default)]
    pub icache: Option<CacheConfig>,
    #[serde(default)]
    pub dcache: Option<CacheConfig>,
    #[serde(default = "default_repair")]
    pub tcm_repair_stall_cycles: u32,
}

impl MemoryConfig {
    pub fn new(regions: Vec<RegionDescriptor>) -> MemoryConfig {
        MemoryConfig {
            regions,
            flash: FlashTiming::default(),
            icache: None,
            dcache: None,
            tcm_repair_stall_cycles: default_repair(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapError {
    #[error("region `{0}` has zero length")]
    Empty(String),
    #[error("region `{0}` extends past the end of the address space")]
    Wraps(String),
    #[error("regions `{0}` and `{1}` overlap")]
    Overlap(String, String),
    #[error("bit-band: {0}")]
    BitBand(String),
    #[error("timing: {0}")]
    Timing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Error)]
#[serde(tag = "kind", content = "address", rename_all = "snake_case")]
pub enum MemFault {
    #[error("unmapped address {0:#010x}")]
    Unmapped(u32),
    #[error("write to read-only address {0:#010x}")]
    ReadOnly(u32),
    #[error("unaligned access at {0:#010x}")]
    Unaligned(u32),
    #[error("execute from non-executable address {0:#010x}")]
    NotExecutable(u32),
    #[error("data cache parity error at {0:#010x}")]
    ParityAbort(u32),
}

impl MemFault {
    pub fn address(&self) -> u32 {
        match *self {
            MemFault::Unmapped(a)
            | MemFault::ReadOnly(a)
            | MemFault::Unaligned(a)
            | MemFault::NotExecutable(a)
            | MemFault::ParityAbort(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchFault {
    Breakpoint(u32),
    Bus(MemFault),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheSide {
    Instruction,
    Data,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairKind {
    /// Instruction line invalidated and refetched.
    IcacheLine,
    /// Tag parity error turned into a miss.
    IcacheTag,
    DcacheTag,
    /// Data cache line discarded before a precise abort.
    DcacheLine,
    /// Word corrected from the golden copy while the core was held.
    Tcm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MemEventKind {
    FetchNonseq,
    Miss { side: CacheSide },
    Fill { side: CacheSide },
    Repair { what: RepairKind },
    BitbandWrite { byte: u32, bit: u8, set: bool },
}

/// Something the memory system did during an access. `cycles` is the part
/// of the access cost attributable to this event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemEvent {
    pub kind: MemEventKind,
    pub addr: u32,
    pub cycles: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fetched {
    pub h1: u16,
    pub h2: Option<u16>,
    pub cycles: u32,
}

impl Fetched {
    pub fn len(&self) -> u32 {
        if self.h2.is_some() {
            4
        } else {
            2
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// One bit flip in a storage structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "snake_case", deny_unknown_fields)]
pub enum SoftErrorInjection {
    IcacheData { line: u32, word: u32, bit: u32 },
    IcacheTag { line: u32, bit: u32 },
    DcacheData { line: u32, word: u32, bit: u32 },
    DcacheTag { line: u32, bit: u32 },
    Tcm { address: u32, bit: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "reason", rename_all = "snake_case")]
pub enum InjectOutcome {
    Applied,
    /// Nothing to corrupt (invalid line, missing structure, bad index).
    Skipped(String),
}

#[derive(Debug, Clone, Default)]
struct TcmShadow {
    golden: Vec<u8>,
    /// Word offsets whose parity shadow is marked.
    marked: BTreeSet<u32>,
}

#[derive(Debug, Clone)]
struct Region {
    desc: RegionDescriptor,
    data: Vec<u8>,
    tcm: Option<TcmShadow>,
}

impl Region {
    fn off(&self, addr: u32) -> usize {
        (addr - self.desc.base) as usize
    }

    fn load(&self, addr: u32, len: u32) -> u32 {
        let o = self.off(addr);
        (0..len as usize).fold(0u32, |v, i| v | (self.data[o + i] as u32) << (8 * i))
    }

    fn store(&mut self, addr: u32, len: u32, value: u32) {
        let o = self.off(addr);
        for i in 0..len as usize {
            self.data[o + i] = (value >> (8 * i)) as u8;
        }
    }
}

/// The whole memory system of one simulator instance.
#[derive(Debug, Clone)]
pub struct MemorySystem {
    regions: Vec<Region>,
    bitband: Option<BitBand>,
    pub flash: FlashModel,
    pub icache: Option<Cache>,
    pub dcache: Option<Cache>,
    pub fpb: FlashPatchUnit,
    tcm_repair_stall_cycles: u32,
    events: Vec<MemEvent>,
}

fn extract(word: u32, addr: u32, len: u32) -> u32 {
    let shifted = word >> ((addr & 3) * 8);
    if len == 4 {
        shifted
    } else {
        shifted & ((1 << (8 * len)) - 1)
    }
}

fn merge(word: u32, addr: u32, len: u32, value: u32) -> u32 {
    if len == 4 {
        return value;
    }
    let shift = (addr & 3) * 8;
    let mask = ((1u32 << (8 * len)) - 1) << shift;
    (word & !mask) | ((value << shift) & mask)
}

impl MemorySystem {
    pub fn new(config: &MemoryConfig) -> Result<MemorySystem, MapError> {
        config.flash.validate().map_err(MapError::Timing)?;
        for c in config.icache.iter().chain(config.dcache.iter()) {
            c.validate().map_err(MapError::Timing)?;
        }
        let mut sorted: Vec<&RegionDescriptor> = config.regions.iter().collect();
        sorted.sort_by_key(|r| r.base);
        for r in &sorted {
            if r.length == 0 {
                return Err(MapError::Empty(r.name.clone()));
            }
            if r.end() > 1u64 << 32 {
                return Err(MapError::Wraps(r.name.clone()));
            }
        }
        for w in sorted.windows(2) {
            if w[0].end() > w[1].base as u64 {
                return Err(MapError::Overlap(w[0].name.clone(), w[1].name.clone()));
            }
        }
        let of_kind = |k| config.regions.iter().filter(move |r| r.kind == k);
        let targets: Vec<_> = of_kind(RegionKind::BitbandTarget).collect();
        let aliases: Vec<_> = of_kind(RegionKind::BitbandAlias).collect();
        let bitband = match (targets.as_slice(), aliases.as_slice()) {
            ([], []) => None,
            ([t], [a]) => {
                let bb = BitBand::new(t.base, t.length, a.base).map_err(MapError::BitBand)?;
                if a.length as u64 != bb.alias_len() as u64 {
                    return Err(MapError::BitBand(format!(
                        "alias `{}` must be exactly 8x target `{}`",
                        a.name, t.name
                    )));
                }
                Some(bb)
            }
            _ => {
                return Err(MapError::BitBand(
                    "exactly one bitband_alias must pair with exactly one bitband_target".into(),
                ))
            }
        };
        let regions = config
            .regions
            .iter()
            .map(|d| {
                let data = if d.kind == RegionKind::BitbandAlias {
                    Vec::new()
                } else {
                    vec![0u8; d.length as usize]
                };
                let tcm = (d.kind == RegionKind::Tcm).then(|| TcmShadow {
                    golden: data.clone(),
                    marked: BTreeSet::new(),
                });
                Region {
                    desc: d.clone(),
                    data,
                    tcm,
                }
            })
            .collect();
        Ok(MemorySystem {
            regions,
            bitband,
            flash: FlashModel::new(config.flash),
            icache: config.icache.map(Cache::new),
            dcache: config.dcache.map(Cache::new),
            fpb: FlashPatchUnit::default(),
            tcm_repair_stall_cycles: config.tcm_repair_stall_cycles,
            events: Vec::new(),
        })
    }

    pub fn regions(&self) -> impl Iterator<Item = &RegionDescriptor> {
        self.regions.iter().map(|r| &r.desc)
    }

    pub fn region_at(&self, addr: u32) -> Option<&RegionDescriptor> {
        self.find(addr).map(|i| &self.regions[i].desc)
    }

    pub fn region_named(&self, name: &str) -> Option<&RegionDescriptor> {
        self.regions().find(|r| r.name == name)
    }

    /// Raw contents of a named region (TCM words as stored, including
    /// any not-yet-repaired flips).
    pub fn region_bytes(&self, name: &str) -> Option<&[u8]> {
        self.regions
            .iter()
            .find(|r| r.desc.name == name)
            .map(|r| r.data.as_slice())
    }

    pub fn bitband(&self) -> Option<&BitBand> {
        self.bitband.as_ref()
    }

    pub fn translate_bitband(&self, addr: u32) -> Option<(u32, u8)> {
        self.bitband.and_then(|b| b.translate(addr))
    }

    /// Events recorded since the last drain.
    pub fn events(&self) -> &[MemEvent] {
        &self.events
    }

    pub fn drain_events(&mut self) -> std::vec::Drain<'_, MemEvent> {
        self.events.drain(..)
    }

    fn find(&self, addr: u32) -> Option<usize> {
        self.regions.iter().position(|r| r.desc.contains(addr))
    }

    fn find_span(&self, addr: u32, len: u32) -> Result<usize, MemFault> {
        let i = self.find(addr).ok_or(MemFault::Unmapped(addr))?;
        if (addr as u64 + len as u64) > self.regions[i].desc.end() {
            return Err(MemFault::Unmapped(addr));
        }
        Ok(i)
    }

    pub fn is_device(&self, addr: u32) -> bool {
        self.region_at(addr)
            .is_some_and(|r| r.kind == RegionKind::Device)
    }

    fn push(&mut self, kind: MemEventKind, addr: u32, cycles: u32) {
        self.events.push(MemEvent { kind, addr, cycles });
    }

    /// Untimed read with no side effects (harness inspection, vector setup).
    pub fn peek(&self, addr: u32, size: MemSize) -> Result<u32, MemFault> {
        let len = size.bytes();
        if let Some((byte, bit)) = self.translate_bitband(addr) {
            return Ok((self.peek(byte, MemSize::Byte)? >> bit) & 1);
        }
        let i = self.find_span(addr, len)?;
        Ok(self.regions[i].load(addr, len))
    }

    /// Untimed write that bypasses protection, caches and timing; keeps the
    /// TCM golden copy and any cached copy coherent. Used for loading images.
    pub fn poke(&mut self, addr: u32, size: MemSize, value: u32) -> Result<(), MemFault> {
        let len = size.bytes();
        if let Some((byte, bit)) = self.translate_bitband(addr) {
            let old = self.peek(byte, MemSize::Byte)? as u8;
            return self.poke(
                byte,
                MemSize::Byte,
                bitband::merge_bit(old, bit, value) as u32,
            );
        }
        let i = self.find_span(addr, len)?;
        let r = &mut self.regions[i];
        r.store(addr, len, value);
        if let Some(t) = r.tcm.as_mut() {
            let o = (addr - r.desc.base) as usize;
            t.golden[o..o + len as usize].copy_from_slice(&r.data[o..o + len as usize]);
            t.marked.remove(&((o as u32) & !3));
        }
        for c in [&mut self.icache, &mut self.dcache].into_iter().flatten() {
            if c.lookup(addr) == Lookup::Hit {
                let w = c.word(addr & !3);
                c.update_word(addr & !3, merge(w, addr, len, value));
            }
        }
        Ok(())
    }

    pub fn load_bytes(&mut self, base: u32, bytes: &[u8]) -> Result<(), MemFault> {
        for (i, b) in bytes.iter().enumerate() {
            self.poke(base.wrapping_add(i as u32), MemSize::Byte, *b as u32)?;
        }
        Ok(())
    }

    pub fn fpb_configure(
        &mut self,
        entry: usize,
        match_address: u32,
        mode: FpbMode,
        remap_value: u32,
    ) -> Result<(), FpbError> {
        let in_flash = self
            .region_at(match_address)
            .is_some_and(|r| r.kind == RegionKind::Flash);
        self.fpb
            .configure(entry, match_address, mode, remap_value, in_flash)
    }

    fn raw_flash_load(&self, i: usize, addr: u32, len: u32) -> u32 {
        let r = &self.regions[i];
        match self.fpb.remap_word(addr) {
            Some(word) if r.desc.kind == RegionKind::Flash => extract(word, addr, len),
            _ => r.load(addr, len),
        }
    }

    fn line_words(&self, i: usize, base: u32) -> [u32; LINE_WORDS] {
        let mut words = [0u32; LINE_WORDS];
        let r = &self.regions[i];
        for (k, w) in words.iter_mut().enumerate() {
            let a = base + 4 * k as u32;
            *w = if r.desc.contains(a) { r.load(a, 4) } else { 0 };
        }
        words
    }

    /// Whether a data access at `addr` will have to fill a cache line.
    pub fn data_access_will_fill(&self, addr: u32) -> bool {
        let Some(i) = self.find(addr) else {
            return false;
        };
        self.regions[i].desc.cached
            && self
                .dcache
                .as_ref()
                .is_some_and(|c| matches!(c.lookup(addr), Lookup::Miss | Lookup::TagError))
    }

    fn tcm_check(&mut self, i: usize, addr: u32) -> u32 {
        let r = &mut self.regions[i];
        let Some(t) = r.tcm.as_mut() else {
            return 0;
        };
        let word_off = (addr - r.desc.base) & !3;
        if !t.marked.remove(&word_off) {
            return 0;
        }
        let o = word_off as usize;
        let end = (o + 4).min(r.data.len());
        r.data[o..end].copy_from_slice(&t.golden[o..end]);
        let stall = self.tcm_repair_stall_cycles;
        self.push(
            MemEventKind::Repair {
                what: RepairKind::Tcm,
            },
            addr & !3,
            stall,
        );
        stall
    }

    fn cached_access(&mut self, i: usize, addr: u32, side: CacheSide) -> Result<u32, MemFault> {
        let cache = match side {
            CacheSide::Instruction => self.icache.as_ref(),
            CacheSide::Data => self.dcache.as_ref(),
        }
        .expect("cached access without a cache");
        let cfg = cache.config;
        let lookup = cache.lookup(addr);
        let base = line_base(addr);
        let mut cycles = cfg.hit_cycles;
        match lookup {
            Lookup::Hit => {}
            Lookup::DataError if side == CacheSide::Data => {
                self.dcache.as_mut().unwrap().invalidate_at(addr);
                self.push(
                    MemEventKind::Repair {
                        what: RepairKind::DcacheLine,
                    },
                    base,
                    0,
                );
                return Err(MemFault::ParityAbort(addr));
            }
            Lookup::Miss | Lookup::TagError | Lookup::DataError => {
                let repair = match (lookup, side) {
                    (Lookup::TagError, CacheSide::Instruction) => Some(RepairKind::IcacheTag),
                    (Lookup::TagError, CacheSide::Data) => Some(RepairKind::DcacheTag),
                    (Lookup::DataError, _) => Some(RepairKind::IcacheLine),
                    _ => None,
                };
                if let Some(what) = repair {
                    self.push(MemEventKind::Repair { what }, base, 0);
                }
                if lookup != Lookup::DataError {
                    self.push(MemEventKind::Miss { side }, base, 0);
                }
                let words = self.line_words(i, base);
                let c = match side {
                    CacheSide::Instruction => self.icache.as_mut(),
                    CacheSide::Data => self.dcache.as_mut(),
                }
                .unwrap();
                c.fill(base, words);
                self.push(MemEventKind::Fill { side }, base, cfg.fill_cycles_per_line);
                cycles += cfg.fill_cycles_per_line;
            }
        }
        Ok(cycles)
    }

    fn check_aligned(addr: u32, len: u32) -> Result<(), MemFault> {
        if !addr.is_multiple_of(len) {
            Err(MemFault::Unaligned(addr))
        } else {
            Ok(())
        }
    }

    /// Timed data read. Returns `(value, cycles)`.
    pub fn read(&mut self, addr: u32, size: MemSize) -> Result<(u32, u32), MemFault> {
        let len = size.bytes();
        if let Some((byte, bit)) = self.translate_bitband(addr) {
            let i = self.find_span(byte, 1)?;
            let v = self.regions[i].load(byte, 1);
            return Ok(((v >> bit) & 1, self.regions[i].desc.access_cycles));
        }
        Self::check_aligned(addr, len)?;
        let i = self.find_span(addr, len)?;
        let desc = self.regions[i].desc.clone();
        if desc.cached && self.dcache.is_some() {
            let cycles = self.cached_access(i, addr, CacheSide::Data)?;
            let word = self.dcache.as_ref().unwrap().word(addr & !3);
            let value = match self.fpb.remap_word(addr) {
                Some(w) if desc.kind == RegionKind::Flash => w,
                _ => word,
            };
            return Ok((extract(value, addr, len), cycles));
        }
        match desc.kind {
            RegionKind::Flash => {
                let cycles = self.flash.access(addr, len).cycles;
                Ok((self.raw_flash_load(i, addr, len), cycles))
            }
            _ => {
                let base_cycles = desc.access_cycles;
                let stall = self.tcm_check(i, addr);
                Ok((self.regions[i].load(addr, len), base_cycles + stall))
            }
        }
    }

    /// Timed data write. Returns cycles.
    pub fn write(&mut self, addr: u32, size: MemSize, value: u32) -> Result<u32, MemFault> {
        let len = size.bytes();
        if let Some((byte, bit)) = self.translate_bitband(addr) {
            let i = self.find_span(byte, 1)?;
            let r = &mut self.regions[i];
            let old = r.load(byte, 1) as u8;
            let new = bitband::merge_bit(old, bit, value);
            r.store(byte, 1, new as u32);
            let cycles = 2 * r.desc.access_cycles;
            self.push(
                MemEventKind::BitbandWrite {
                    byte,
                    bit,
                    set: value & 1 == 1,
                },
                addr,
                0,
            );
            return Ok(cycles);
        }
        Self::check_aligned(addr, len)?;
        let i = self.find_span(addr, len)?;
        if !self.regions[i].desc.is_writable() {
            return Err(MemFault::ReadOnly(addr));
        }
        let cycles = self.regions[i].desc.access_cycles;
        if self.regions[i].desc.cached {
            if let Some(c) = self.dcache.as_mut() {
                match c.lookup(addr) {
                    Lookup::DataError => {
                        c.invalidate_at(addr);
                        self.push(
                            MemEventKind::Repair {
                                what: RepairKind::DcacheLine,
                            },
                            line_base(addr),
                            0,
                        );
                        return Err(MemFault::ParityAbort(addr));
                    }
                    Lookup::Hit => {
                        let w = c.word(addr & !3);
                        c.update_word(addr & !3, merge(w, addr, len, value));
                    }
                    Lookup::Miss | Lookup::TagError => {}
                }
            }
        }
        let stall = if len < 4 { self.tcm_check(i, addr) } else { 0 };
        let r = &mut self.regions[i];
        r.store(addr, len, value);
        if let Some(t) = r.tcm.as_mut() {
            let o = (addr - r.desc.base) as usize;
            t.golden[o..o + len as usize].copy_from_slice(&r.data[o..o + len as usize]);
            t.marked.remove(&((o as u32) & !3));
        }
        Ok(cycles + stall)
    }

    /// Instruction fetch at `addr`. Returns the halfword(s) of the
    /// instruction and the fetch cost.
    pub fn fetch(&mut self, addr: u32, ignore_breakpoint: bool) -> Result<Fetched, FetchFault> {
        let bus = FetchFault::Bus;
        if !addr.is_multiple_of(2) {
            return Err(bus(MemFault::Unaligned(addr)));
        }
        let i = self.find_span(addr, 2).map_err(bus)?;
        let desc = self.regions[i].desc.clone();
        if !desc.is_executable() {
            return Err(bus(MemFault::NotExecutable(addr)));
        }
        if !ignore_breakpoint && self.fpb.breakpoint_at(addr) {
            return Err(FetchFault::Breakpoint(addr));
        }
        let h1 = self.raw_flash_load(i, addr, 2) as u16;
        let len = if is_wide_prefix(h1) { 4 } else { 2 };
        if len == 4 {
            self.find_span(addr, 4).map_err(bus)?;
        }

        if desc.cached && self.icache.is_some() {
            let mut cycles = 0;
            let first = line_base(addr);
            let last = line_base(addr + len - 1);
            cycles += self
                .cached_access(i, addr, CacheSide::Instruction)
                .map_err(bus)?;
            if last != first {
                cycles += self
                    .cached_access(i, last, CacheSide::Instruction)
                    .map_err(bus)?
                    - self.icache.as_ref().unwrap().config.hit_cycles;
            }
            let cache = self.icache.as_ref().unwrap();
            let half = |a: u32| -> u16 {
                match self.fpb.remap_word(a) {
                    Some(w) if desc.kind == RegionKind::Flash => extract(w, a, 2) as u16,
                    _ => extract(cache.word(a & !3), a, 2) as u16,
                }
            };
            let h1 = half(addr);
            let h2 = (len == 4).then(|| half(addr + 2));
            return Ok(Fetched { h1, h2, cycles });
        }

        let h2 = (len == 4).then(|| self.raw_flash_load(i, addr + 2, 2) as u16);
        let cycles = match desc.kind {
            RegionKind::Flash => {
                let a = self.flash.access(addr, len);
                if !a.sequential {
                    let t = self.flash.timing;
                    self.push(
                        MemEventKind::FetchNonseq,
                        addr,
                        t.nonsequential_cycles - t.sequential_cycles,
                    );
                }
                a.cycles
            }
            _ => {
                let mut stall = self.tcm_check(i, addr);
                if len == 4 && (addr + 2) & !3 != addr & !3 {
                    stall += self.tcm_check(i, addr + 2);
                }
                // A repair rewrites the stored halfwords; reread them.
                let h1 = self.regions[i].load(addr, 2) as u16;
                let h2 = (len == 4).then(|| self.regions[i].load(addr + 2, 2) as u16);
                return Ok(Fetched {
                    h1,
                    h2,
                    cycles: desc.access_cycles + stall,
                });
            }
        };
        Ok(Fetched { h1, h2, cycles })
    }

    /// Flips one bit as described by `inj` and marks its parity shadow.
    pub fn inject(&mut self, inj: &SoftErrorInjection) -> InjectOutcome {
        use SoftErrorInjection::*;
        let skipped = |s: &str| InjectOutcome::Skipped(s.to_string());
        match *inj {
            IcacheData { line, word, bit } | DcacheData { line, word, bit } => {
                let cache = if matches!(inj, IcacheData { .. }) {
                    self.icache.as_mut()
                } else {
                    self.dcache.as_mut()
                };
                let Some(c) = cache else {
                    return skipped("no such cache");
                };
                if line >= c.config.line_count || word >= LINE_WORDS as u32 || bit >= 32 {
                    return skipped("index out of range");
                }
                if c.flip_data_bit(line as usize, word as usize, bit) {
                    InjectOutcome::Applied
                } else {
                    skipped("line not valid")
                }
            }
            IcacheTag { line, bit } | DcacheTag { line, bit } => {
                let cache = if matches!(inj, IcacheTag { .. }) {
                    self.icache.as_mut()
                } else {
                    self.dcache.as_mut()
                };
                let Some(c) = cache else {
                    return skipped("no such cache");
                };
                if line >= c.config.line_count || bit >= TAG_BITS {
                    return skipped("index out of range");
                }
                if c.flip_tag_bit(line as usize, bit) {
                    InjectOutcome::Applied
                } else {
                    skipped("line not valid")
                }
            }
            Tcm { address, bit } => {
                let Some(i) = self.find(address) else {
                    return skipped("address not mapped");
                };
                let r = &mut self.regions[i];
                let Some(t) = r.tcm.as_mut() else {
                    return skipped("address not in tcm");
                };
                if bit >= 32 {
                    return skipped("index out of range");
                }
                let word_off = (address - r.desc.base) & !3;
                let byte = word_off as usize + (bit / 8) as usize;
                if byte >= r.data.len() {
                    return skipped("index out of range");
                }
                r.data[byte] ^= 1 << (bit % 8);
                t.marked.insert(word_off);
                InjectOutcome::Applied
            }
        }
    }

    /// Parity-marked TCM words (byte offsets within their regions).
    pub fn tcm_marked_words(&self) -> usize {
        self.regions
            .iter()
            .filter_map(|r| r.tcm.as_ref())
            .map(|t| t.marked.len())
            .sum()
    }

    /// Instruction-cache line indices currently holding addresses in
    /// `[start, end)`.
    pub fn icache_lines_in(&self, start: u32, end: u32) -> Vec<usize> {
        self.icache
            .as_ref()
            .map(|c| c.valid_lines_in(start, end))
            .unwrap_or_default()
    }

    pub fn dcache_lines_in(&self, start: u32, end: u32) -> Vec<usize> {
        self.dcache
            .as_ref()
            .map(|c| c.valid_lines_in(start, end))
            .unwrap_or_default()
    }

    pub fn line_bytes(&self) -> u32 {
        LINE_BYTES
    }
}
