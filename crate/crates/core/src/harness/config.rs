use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::campaign::CampaignSpec;
use super::overrides::apply_overrides;
use super::ConfigError;
use crate::asm::{assemble, LoadMode, ProgramImage};
use crate::isa::MemSize;
use crate::machine::{Machine, MachineConfig, Stimulus};
use crate::memory::fpb::FpbMode;
use crate::memory::{MemoryConfig, RegionDescriptor, RegionKind, SoftErrorInjection};
use crate::mpu::{MpuConfig, MpuRegion, Perms, REGION_COUNT};
use crate::nvic::{LineConfig, NvicCosts};

pub const DEFAULT_CYCLE_LIMIT: u64 = 10_000_000;

/// An address given as a number or as a program symbol (`name` or
/// `name+offset`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Addr {
    Num(u32),
    Sym(String),
}

impl Addr {
    pub fn resolve(&self, image: &ProgramImage, path: &str) -> Result<u32, ConfigError> {
        match self {
            Addr::Num(n) => Ok(*n),
            Addr::Sym(s) => {
                let (name, off) = match s.split_once('+') {
                    Some((n, o)) => {
                        let o = o.trim();
                        let v = match o.strip_prefix("0x") {
                            Some(h) => u32::from_str_radix(h, 16),
                            None => o.parse(),
                        }
                        .map_err(|_| ConfigError::new(path, format!("bad offset in `{s}`")))?;
                        (n.trim(), v)
                    }
                    None => (s.trim(), 0),
                };
                image
                    .symbol(name)
                    .map(|a| a.wrapping_add(off))
                    .ok_or_else(|| ConfigError::new(path, format!("unknown symbol `{name}`")))
            }
        }
    }
}

impl From<u32> for Addr {
    fn from(v: u32) -> Addr {
        Addr::Num(v)
    }
}

impl From<&str> for Addr {
    fn from(s: &str) -> Addr {
        Addr::Sym(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramConfig {
    /// Assembly file, relative to the configuration document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Inline assembly source.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default)]
    pub mode: LoadMode,
}

impl ProgramConfig {
    pub fn inline(source: impl Into<String>, mode: LoadMode) -> ProgramConfig {
        ProgramConfig {
            path: None,
            source: Some(source.into()),
            mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpuRegionSetting {
    pub index: usize,
    pub base: Addr,
    pub size: u64,
    #[serde(default)]
    pub perms: Perms,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpuSettings {
    #[serde(default)]
    pub enabled: bool,
    /// Privileged accesses outside every region use the default map.
    #[serde(default = "yes")]
    pub background: bool,
    #[serde(default)]
    pub regions: Vec<MpuRegionSetting>,
}

fn yes() -> bool {
    true
}

impl Default for MpuSettings {
    fn default() -> Self {
        MpuSettings {
            enabled: false,
            background: true,
            regions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpbSetting {
    pub entry: usize,
    pub address: Addr,
    pub mode: FpbMode,
    #[serde(default)]
    pub value: u32,
}

/// A soft error applied when the run reaches a cycle or instruction count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimedInjection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_cycle: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_instruction: Option<u64>,
    pub error: SoftErrorInjection,
}

/// Words written into memory before the run starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemInit {
    pub address: Addr,
    pub words: Vec<Addr>,
}

/// A flat binary file copied into memory at `base` after the program.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawImage {
    pub path: PathBuf,
    pub base: Addr,
}

/// A check on the final state. Exactly one of `register`, `memory` and
/// `halt` is given; the first two need `equals`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub register: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<Addr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equals: Option<u32>,
    /// Halt reason name, e.g. `halt`, `breakpoint`, `cycle_limit`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halt: Option<String>,
}

/// The configuration document for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub name: String,
    pub program: ProgramConfig,
    #[serde(default = "default_memory")]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub mpu: MpuSettings,
    #[serde(default)]
    pub lines: Vec<LineConfig>,
    #[serde(default)]
    pub costs: NvicCosts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vector_table: Option<Addr>,
    #[serde(default)]
    pub stimuli: Vec<Stimulus>,
    #[serde(default)]
    pub fpb: Vec<FpbSetting>,
    #[serde(default)]
    pub injections: Vec<TimedInjection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub campaign: Option<CampaignSpec>,
    #[serde(default = "default_limit")]
    pub cycle_limit: u64,
    /// Defaults to symbol `start`, else the image base.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entry: Option<Addr>,
    /// Defaults to the end of the first RAM region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_sp: Option<u32>,
    #[serde(default)]
    pub images: Vec<RawImage>,
    #[serde(default)]
    pub init: Vec<MemInit>,
    #[serde(default)]
    pub expect: Vec<Expectation>,
    /// Keep per-event trace records (counters are always kept).
    #[serde(default = "yes")]
    pub trace: bool,
}

fn default_limit() -> u64 {
    DEFAULT_CYCLE_LIMIT
}

/// 64 KiB of flash at 0 and 64 KiB of RAM at 0x2000_0000.
pub fn default_memory() -> MemoryConfig {
    MemoryConfig::new(vec![
        RegionDescriptor::new("flash", RegionKind::Flash, 0, 0x1_0000),
        RegionDescriptor::new("ram", RegionKind::Ram, 0x2000_0000, 0x1_0000),
    ])
}

fn deser_error<E: std::fmt::Display>(e: serde_path_to_error::Error<E>) -> ConfigError {
    let path = e.path().to_string();
    let path = if path == "." { String::new() } else { path };
    ConfigError::new(path, e.inner())
}

impl RunConfig {
    pub fn new(program: ProgramConfig) -> RunConfig {
        RunConfig {
            name: String::new(),
            program,
            memory: default_memory(),
            mpu: MpuSettings::default(),
            lines: Vec::new(),
            costs: NvicCosts::default(),
            vector_table: None,
            stimuli: Vec::new(),
            fpb: Vec::new(),
            injections: Vec::new(),
            campaign: None,
            cycle_limit: DEFAULT_CYCLE_LIMIT,
            entry: None,
            initial_sp: None,
            images: Vec::new(),
            init: Vec::new(),
            expect: Vec::new(),
            trace: true,
        }
    }

    /// Parses a TOML document, applying `path=value` overrides first.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::new("", e.message().trim()))?;
        apply_overrides(&mut table, overrides)?;
        Self::from_table(table)
    }

    pub fn from_table(table: toml::Table) -> Result<RunConfig, ConfigError> {
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(deser_error)
    }

    /// Reads a configuration file; a relative program path is taken
    /// relative to the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        let relative = cfg.program.path.iter_mut();
        for p in relative.chain(cfg.images.iter_mut().map(|i| &mut i.path)) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    fn source(&self) -> Result<String, ConfigError> {
        match (&self.program.path, &self.program.source) {
            (Some(p), None) => std::fs::read_to_string(p)
                .map_err(|e| ConfigError::new("program.path", format!("{}: {e}", p.display()))),
            (None, Some(s)) => Ok(s.clone()),
            _ => Err(ConfigError::new(
                "program",
                "give exactly one of `path` and `source`",
            )),
        }
    }

    /// Validates the document and resolves every symbolic reference.
    pub fn prepare(&self) -> Result<Prepared, ConfigError> {
        if self.cycle_limit == 0 {
            return Err(ConfigError::new("cycle_limit", "must be positive"));
        }
        let src = self.source()?;
        let image = assemble(&src, self.program.mode)
            .map_err(|e| ConfigError::new("program", format!("assembly failed: {e}")))?;

        let mut mpu = MpuConfig {
            enabled: self.mpu.enabled,
            background_privileged_allowed: self.mpu.background,
            ..MpuConfig::default()
        };
        for (i, r) in self.mpu.regions.iter().enumerate() {
            let path = format!("mpu.regions[{i}]");
            if r.index >= REGION_COUNT {
                return Err(ConfigError::new(
                    format!("{path}.index"),
                    format!("must be below {REGION_COUNT}"),
                ));
            }
            let base = r.base.resolve(&image, &format!("{path}.base"))?;
            let region = MpuRegion::new(base, r.size, r.perms);
            region.validate().map_err(|e| ConfigError::new(&path, e))?;
            mpu.regions[r.index] = Some(region);
        }

        for (i, s) in self.stimuli.iter().enumerate() {
            if s.line >= self.lines.len() {
                return Err(ConfigError::new(
                    format!("stimuli[{i}].line"),
                    format!("no such interrupt line ({} configured)", self.lines.len()),
                ));
            }
        }
        let vector_table_base = match &self.vector_table {
            Some(a) => a.resolve(&image, "vector_table")?,
            None => 0,
        };

        let machine = MachineConfig {
            memory: self.memory.clone(),
            mpu,
            lines: self.lines.clone(),
            costs: self.costs,
            vector_table_base,
            stimuli: self.stimuli.clone(),
            cycle_limit: self.cycle_limit,
            keep_trace: self.trace,
        };

        let entry = match &self.entry {
            Some(a) => a.resolve(&image, "entry")?,
            None => image.symbol("start").unwrap_or(image.base),
        };
        let sp = match self.initial_sp {
            Some(sp) => sp,
            None => self
                .memory
                .regions
                .iter()
                .find(|r| r.kind == RegionKind::Ram)
                .map(|r| r.end() as u32)
                .ok_or_else(|| {
                    ConfigError::new("initial_sp", "no RAM region to place the stack in")
                })?,
        };

        let mut fpb = Vec::new();
        for (i, f) in self.fpb.iter().enumerate() {
            let addr = f.address.resolve(&image, &format!("fpb[{i}].address"))?;
            fpb.push((f.entry, addr, f.mode, f.value));
        }

        let mut injections = Vec::new();
        for (i, inj) in self.injections.iter().enumerate() {
            let when = match (inj.at_cycle, inj.at_instruction) {
                (Some(c), None) => When::Cycle(c),
                (None, Some(n)) => When::Instruction(n),
                _ => {
                    return Err(ConfigError::new(
                        format!("injections[{i}]"),
                        "give exactly one of `at_cycle` and `at_instruction`",
                    ))
                }
            };
            injections.push((when, inj.error));
        }
        injections.sort_by_key(|(w, _)| *w);

        let mut images = Vec::new();
        for (i, r) in self.images.iter().enumerate() {
            let base = r.base.resolve(&image, &format!("images[{i}].base"))?;
            let bytes = std::fs::read(&r.path).map_err(|e| {
                ConfigError::new(
                    format!("images[{i}].path"),
                    format!("{}: {e}", r.path.display()),
                )
            })?;
            images.push((base, bytes));
        }

        let mut init = Vec::new();
        for (i, m) in self.init.iter().enumerate() {
            let base = m.address.resolve(&image, &format!("init[{i}].address"))?;
            for (j, w) in m.words.iter().enumerate() {
                let v = w.resolve(&image, &format!("init[{i}].words[{j}]"))?;
                init.push((base.wrapping_add(4 * j as u32), v));
            }
        }

        for (i, e) in self.expect.iter().enumerate() {
            let path = format!("expect[{i}]");
            let kinds =
                e.register.is_some() as u8 + e.memory.is_some() as u8 + e.halt.is_some() as u8;
            if kinds != 1 {
                return Err(ConfigError::new(
                    path,
                    "give exactly one of `register`, `memory` and `halt`",
                ));
            }
            if e.halt.is_none() && e.equals.is_none() {
                return Err(ConfigError::new(format!("{path}.equals"), "missing"));
            }
            if let Some(r) = &e.register {
                if crate::asm::parse_register(r).is_none() {
                    return Err(ConfigError::new(
                        format!("{path}.register"),
                        format!("unknown register `{r}`"),
                    ));
                }
            }
            if let Some(a) = &e.memory {
                a.resolve(&image, &format!("{path}.memory"))?;
            }
        }

        let prepared = Prepared {
            config: self.clone(),
            image,
            machine,
            entry,
            sp,
            fpb,
            injections,
            images,
            init,
        };
        // Surface map, stimulus and FPB errors before anything runs.
        prepared.boot()?;
        Ok(prepared)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum When {
    Cycle(u64),
    Instruction(u64),
}

/// A validated configuration with symbols resolved, ready to boot any
/// number of identical machines.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: RunConfig,
    pub image: ProgramImage,
    pub machine: MachineConfig,
    pub entry: u32,
    pub sp: u32,
    pub(crate) fpb: Vec<(usize, u32, FpbMode, u32)>,
    pub(crate) injections: Vec<(When, SoftErrorInjection)>,
    pub(crate) images: Vec<(u32, Vec<u8>)>,
    pub(crate) init: Vec<(u32, u32)>,
}

impl Prepared {
    /// A freshly reset machine with the program and initial data loaded.
    pub fn boot(&self) -> Result<Machine, ConfigError> {
        self.boot_with(self.machine.keep_trace)
    }

    pub fn boot_with(&self, keep_trace: bool) -> Result<Machine, ConfigError> {
        let mut cfg = self.machine.clone();
        cfg.keep_trace = keep_trace;
        let mut m = Machine::new(&cfg).map_err(|e| {
            let path = match &e {
                crate::machine::ConfigError::Memory(_) => "memory".to_string(),
                crate::machine::ConfigError::Stimulus { index, .. } => format!("stimuli[{index}]"),
                crate::machine::ConfigError::CycleLimit => "cycle_limit".to_string(),
            };
            ConfigError::new(path, e)
        })?;
        self.image.load_into(&mut m.mem).map_err(|e| {
            ConfigError::new("program", format!("image does not fit the memory map: {e}"))
        })?;
        for (i, (base, bytes)) in self.images.iter().enumerate() {
            m.mem
                .load_bytes(*base, bytes)
                .map_err(|e| ConfigError::new(format!("images[{i}]"), e))?;
        }
        for (addr, v) in &self.init {
            m.mem
                .poke(*addr, MemSize::Word, *v)
                .map_err(|e| ConfigError::new("init", e))?;
        }
        for (i, (entry, addr, mode, value)) in self.fpb.iter().enumerate() {
            m.mem
                .fpb_configure(*entry, *addr, *mode, *value)
                .map_err(|e| ConfigError::new(format!("fpb[{i}]"), e))?;
        }
        m.reset(self.entry, self.sp);
        Ok(m)
    }
}
