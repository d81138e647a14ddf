//! Seeded soft-error campaigns: one golden run, then one fresh run per
//! injection, each compared against the golden outputs.
//!
//! Draws come from ChaCha8 seeded with `seed` (via `SeedableRng::seed_from_u64`).
//! Each injection consumes, in order: the target kind (mixed campaigns
//! only), the injection cycle, a candidate selector, a word index and a
//! bit index. Replays are exact within this implementation.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Addr, Prepared};
use super::ConfigError;
use crate::isa::{Offset, Op, Reg};
use crate::machine::{CpuState, FaultKind, HaltReason, Machine};
use crate::memory::cache::LINE_BYTES;
use crate::memory::{InjectOutcome, RegionKind, SoftErrorInjection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignTarget {
    Icache,
    Dcache,
    Tcm,
    #[default]
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub seed: u64,
    pub count: u32,
    #[serde(default)]
    pub target: CampaignTarget,
    /// Injection cycles are drawn from `[from, to]`. Defaults to the
    /// second quarter of the golden run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[u64; 2]>,
    /// Address ranges `[start, end)` whose cache lines or TCM words may
    /// be hit. Default to the program image, the first cached data region
    /// and the first TCM region.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icache_range: Option<[Addr; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dcache_range: Option<[Addr; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tcm_range: Option<[Addr; 2]>,
}

impl CampaignSpec {
    pub fn new(seed: u64, count: u32, target: CampaignTarget) -> CampaignSpec {
        CampaignSpec {
            seed,
            count,
            target,
            window: None,
            icache_range: None,
            dcache_range: None,
            tcm_range: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Icache,
    Dcache,
    Tcm,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum InjectionResult {
    /// Outputs equal the golden run; recovery cost extra cycles.
    Corrected {
        extra_cycles: u64,
    },
    /// Outputs and timing equal the golden run.
    Masked,
    /// Parity abort reported at the address the faulting instruction
    /// accessed.
    PreciseAbort {
        pc: u32,
        address: u32,
    },
    ImpreciseAbort {
        pc: u32,
        address: u32,
        expected: Vec<u32>,
    },
    /// The flip is still sitting in an unread TCM word.
    Latent,
    Diverged {
        detail: String,
    },
    Skipped {
        reason: String,
    },
}

impl InjectionResult {
    pub fn name(&self) -> &'static str {
        match self {
            InjectionResult::Corrected { .. } => "corrected",
            InjectionResult::Masked => "masked",
            InjectionResult::PreciseAbort { .. } => "precise_abort",
            InjectionResult::ImpreciseAbort { .. } => "imprecise_abort",
            InjectionResult::Latent => "latent",
            InjectionResult::Diverged { .. } => "diverged",
            InjectionResult::Skipped { .. } => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CampaignRun {
    pub index: u32,
    pub structure: Structure,
    pub at_cycle: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub injection: Option<SoftErrorInjection>,
    pub cycles: u64,
    #[serde(flatten)]
    pub result: InjectionResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CampaignReport {
    pub seed: u64,
    pub count: u32,
    pub target: CampaignTarget,
    pub window: [u64; 2],
    pub golden_cycles: u64,
    pub tally: BTreeMap<String, u32>,
    pub runs: Vec<CampaignRun>,
}

impl CampaignReport {
    pub fn count_of(&self, name: &str) -> u32 {
        self.tally.get(name).copied().unwrap_or(0)
    }

    /// No run diverged from the golden outputs and every abort was precise.
    pub fn all_recovered(&self) -> bool {
        self.runs.iter().all(|r| {
            !matches!(
                r.result,
                InjectionResult::Diverged { .. } | InjectionResult::ImpreciseAbort { .. }
            )
        })
    }
}

/// What a run leaves behind that software could observe.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Outputs {
    halt: HaltReason,
    regs: [u32; 16],
    flags: crate::isa::Flags,
    memory: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn of(m: &Machine, halt: HaltReason) -> Outputs {
        let memory = m
            .mem
            .regions()
            .filter(|r| {
                matches!(
                    r.kind,
                    RegionKind::Ram | RegionKind::Tcm | RegionKind::BitbandTarget
                )
            })
            .map(|r| {
                let bytes = m.mem.region_bytes(&r.name).unwrap_or_default().to_vec();
                (r.name.clone(), bytes)
            })
            .collect();
        Outputs {
            halt,
            regs: m.cpu.regs,
            flags: m.cpu.flags,
            memory,
        }
    }

    fn first_difference(&self, other: &Outputs) -> String {
        if self.halt != other.halt {
            return format!("halt {:?} vs {:?}", other.halt, self.halt);
        }
        if let Some(i) = (0..16).find(|&i| self.regs[i] != other.regs[i]) {
            return format!("r{i} = {:#x}, golden {:#x}", other.regs[i], self.regs[i]);
        }
        if self.flags != other.flags {
            return "flags".into();
        }
        for ((name, a), (_, b)) in self.memory.iter().zip(&other.memory) {
            if let Some(o) = a.iter().zip(b).position(|(x, y)| x != y) {
                return format!("{name} byte {o:#x}");
            }
        }
        "none".into()
    }
}

/// Addresses the instruction at `pc` accesses, computed from the register
/// file as it stood when the instruction started.
pub fn access_addresses(op: &Op, cpu: &CpuState, pc: u32) -> Vec<u32> {
    let reg = |r: Reg| {
        if r == Reg::PC {
            pc.wrapping_add(4)
        } else {
            cpu.reg(r)
        }
    };
    match op {
        Op::Load { rn, offset, .. } | Op::Store { rn, offset, .. } => {
            let base = if *rn == Reg::PC { pc & !3 } else { reg(*rn) };
            let off = match offset {
                Offset::Imm(i) => *i as u32,
                Offset::Reg(r) => reg(*r),
            };
            vec![base.wrapping_add(off)]
        }
        Op::Ldm { rn, list, .. } | Op::Stm { rn, list, .. } => (0..list.len())
            .map(|k| reg(*rn).wrapping_add(4 * k))
            .collect(),
        _ => Vec::new(),
    }
}

fn range(
    given: &Option<[Addr; 2]>,
    fallback: Option<(u32, u32)>,
    p: &Prepared,
    path: &str,
) -> Result<Option<(u32, u32)>, ConfigError> {
    match given {
        Some([a, b]) => Ok(Some((
            a.resolve(&p.image, &format!("{path}[0]"))?,
            b.resolve(&p.image, &format!("{path}[1]"))?,
        ))),
        None => Ok(fallback),
    }
}

pub fn run_campaign(p: &Prepared, spec: &CampaignSpec) -> Result<CampaignReport, ConfigError> {
    let mem = &p.machine.memory;
    let image_span = p
        .image
        .segments
        .iter()
        .map(|s| (s.base, s.base + s.length))
        .reduce(|a, b| (a.0.min(b.0), a.1.max(b.1)));
    let cached_data = mem
        .regions
        .iter()
        .find(|r| r.cached && r.kind != RegionKind::Flash)
        .map(|r| (r.base, r.end() as u32));
    let tcm = mem
        .regions
        .iter()
        .find(|r| r.kind == RegionKind::Tcm)
        .map(|r| (r.base, r.end() as u32));

    let mut available = Vec::new();
    let mut ranges = BTreeMap::new();
    let candidates = [
        (
            Structure::Icache,
            mem.icache.is_some(),
            range(&spec.icache_range, image_span, p, "campaign.icache_range")?,
        ),
        (
            Structure::Dcache,
            mem.dcache.is_some(),
            range(&spec.dcache_range, cached_data, p, "campaign.dcache_range")?,
        ),
        (
            Structure::Tcm,
            tcm.is_some(),
            range(&spec.tcm_range, tcm, p, "campaign.tcm_range")?,
        ),
    ];
    for (s, present, r) in candidates {
        if let (true, Some(r)) = (present, r) {
            available.push(s);
            ranges.insert(s, r);
        }
    }
    let wanted = match spec.target {
        CampaignTarget::Icache => Some(Structure::Icache),
        CampaignTarget::Dcache => Some(Structure::Dcache),
        CampaignTarget::Tcm => Some(Structure::Tcm),
        CampaignTarget::Mixed => None,
    };
    match wanted {
        Some(s) if !available.contains(&s) => {
            return Err(ConfigError::new(
                "campaign.target",
                format!("{s:?} is not present in this memory configuration"),
            ))
        }
        None if available.is_empty() => {
            return Err(ConfigError::new(
                "campaign.target",
                "no cache or TCM to inject into",
            ))
        }
        _ => {}
    }

    let mut golden_m = p.boot_with(false)?;
    let golden_halt = golden_m.run();
    let golden = Outputs::of(&golden_m, golden_halt);
    let golden_cycles = golden_m.cycles();
    let window = spec.window.unwrap_or([
        golden_cycles / 4,
        (golden_cycles / 2).max(golden_cycles / 4),
    ]);
    if window[0] > window[1] {
        return Err(ConfigError::new("campaign.window", "start is after end"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut runs = Vec::new();
    for index in 0..spec.count {
        let structure = match wanted {
            Some(s) => s,
            None => available[rng.gen_range(0..available.len())],
        };
        let at = rng.gen_range(window[0]..=window[1]);
        let selector: u32 = rng.gen();
        let word: u32 = rng.gen_range(0..8);
        let bit: u32 = rng.gen_range(0..32);

        let mut m = p.boot_with(false)?;
        let (start, end) = ranges[&structure];
        let mut run = CampaignRun {
            index,
            structure,
            at_cycle: at,
            injection: None,
            cycles: 0,
            result: InjectionResult::Masked,
        };
        if m.run_until(|m| m.cycles() >= at).is_some() {
            run.cycles = m.cycles();
            run.result = InjectionResult::Skipped {
                reason: "program finished before the injection cycle".into(),
            };
            runs.push(run);
            continue;
        }
        run.at_cycle = m.cycles();

        let lines: Vec<(usize, u32)> = {
            let mut out: Vec<(usize, u32)> = Vec::new();
            if structure != Structure::Tcm {
                let mut a = start & !(LINE_BYTES - 1);
                while a < end {
                    let found = match structure {
                        Structure::Icache => m.mem.icache_lines_in(a, a + LINE_BYTES),
                        _ => m.mem.dcache_lines_in(a, a + LINE_BYTES),
                    };
                    for idx in found {
                        if !out.iter().any(|(i, _)| *i == idx) {
                            out.push((idx, a));
                        }
                    }
                    a += LINE_BYTES;
                }
            }
            out
        };
        let injection = match structure {
            Structure::Tcm => {
                let words = (end.saturating_sub(start)) / 4;
                (words > 0).then(|| SoftErrorInjection::Tcm {
                    address: (start & !3) + 4 * (selector % words),
                    bit,
                })
            }
            _ if lines.is_empty() => None,
            s => {
                let (idx, _) = lines[selector as usize % lines.len()];
                let line = idx as u32;
                Some(if s == Structure::Icache {
                    SoftErrorInjection::IcacheData { line, word, bit }
                } else {
                    SoftErrorInjection::DcacheData { line, word, bit }
                })
            }
        };
        let Some(injection) = injection else {
            run.result = InjectionResult::Skipped {
                reason: "no valid line or word in range at the injection cycle".into(),
            };
            run.cycles = m.cycles();
            runs.push(run);
            continue;
        };
        run.injection = Some(injection);
        if let InjectOutcome::Skipped(reason) = m.inject(&injection) {
            run.result = InjectionResult::Skipped { reason };
            run.cycles = m.cycles();
            runs.push(run);
            continue;
        }
        let line_base = match injection {
            SoftErrorInjection::DcacheData { line, .. } => {
                lines.iter().find(|(i, _)| *i == line as usize).map(|l| l.1)
            }
            _ => None,
        };

        let halt = m.run();
        run.cycles = m.cycles();
        run.result = classify(p, &m, halt, &golden, golden_cycles, line_base);
        runs.push(run);
    }

    let mut tally = BTreeMap::new();
    for r in &runs {
        *tally.entry(r.result.name().to_string()).or_insert(0) += 1;
    }
    Ok(CampaignReport {
        seed: spec.seed,
        count: spec.count,
        target: spec.target,
        window,
        golden_cycles,
        tally,
        runs,
    })
}

fn classify(
    p: &Prepared,
    m: &Machine,
    halt: HaltReason,
    golden: &Outputs,
    golden_cycles: u64,
    line_base: Option<u32>,
) -> InjectionResult {
    let parity = m
        .faults
        .iter()
        .rev()
        .find(|f| f.fault.kind == FaultKind::Parity);
    if let Some(f) = parity {
        let expected = p
            .image
            .instruction_at(f.pc)
            .map(|i| access_addresses(&i.op, &m.cpu, f.pc))
            .unwrap_or_default();
        let in_line = line_base
            .map(|b| (b..b + LINE_BYTES).contains(&f.fault.address))
            .unwrap_or(true);
        let stopped_there = matches!(
            halt,
            HaltReason::UnhandledFault { pc, .. } | HaltReason::Lockup { pc, .. } if pc == f.pc
        ) || f.handled;
        return if expected.contains(&f.fault.address) && in_line && stopped_there {
            InjectionResult::PreciseAbort {
                pc: f.pc,
                address: f.fault.address,
            }
        } else {
            InjectionResult::ImpreciseAbort {
                pc: f.pc,
                address: f.fault.address,
                expected,
            }
        };
    }
    let out = Outputs::of(m, halt);
    if out == *golden {
        match m.cycles().checked_sub(golden_cycles) {
            Some(0) => InjectionResult::Masked,
            Some(extra) => InjectionResult::Corrected {
                extra_cycles: extra,
            },
            None => InjectionResult::Diverged {
                detail: "finished earlier than the golden run".into(),
            },
        }
    } else if m.mem.tcm_marked_words() > 0 {
        InjectionResult::Latent
    } else {
        InjectionResult::Diverged {
            detail: golden.first_difference(&out),
        }
    }
}
