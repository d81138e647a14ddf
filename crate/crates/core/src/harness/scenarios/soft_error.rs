//! Seeded bit flips in the instruction cache, TCM and data cache of a
//! checksum loop, each run compared with an undisturbed golden run.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ScenarioOutput, ScenarioReport};
use crate::asm::LoadMode;
use crate::harness::campaign::{run_campaign, CampaignReport, CampaignSpec, CampaignTarget};
use crate::harness::report::Assertion;
use crate::harness::{run as run_config, Addr, ConfigError, MemInit, ProgramConfig, RunConfig};
use crate::memory::cache::CacheConfig;
use crate::memory::{MemoryConfig, RegionDescriptor, RegionKind};
use crate::trace::TraceKind;

pub const TCM_TABLE: u32 = 0x1000_0000;
pub const SRAM_TABLE: u32 = 0x3000_0000;
pub const OUT: u32 = 0x2000_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub seed: u64,
    pub icache: u32,
    pub tcm: u32,
    pub dcache: u32,
    /// Injections spread over all three structures.
    pub mixed: u32,
    pub iterations: u32,
    /// Words in each of the two tables the loop reads.
    pub words: u32,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            seed: 1,
            icache: 100,
            tcm: 100,
            dcache: 100,
            mixed: 0,
            iterations: 4,
            words: 16,
        }
    }
}

pub fn program(iterations: u32, words: u32) -> String {
    format!(
        "\
start:
    ldr r6, ={OUT:#x}
    mov r7, #{iterations}
    mov r0, #0
loop:
    ldr r1, ={TCM_TABLE:#x}
    ldr r2, ={SRAM_TABLE:#x}
    mov r3, #{words}
inner:
    ldr r4, [r1]
    add r0, r0, r4
    ldr r5, [r2]
    eor r0, r0, r5
    add r1, #4
    add r2, #4
    sub r3, #1
    cmp r3, #0
    bne inner
    str r0, [r6]
    add r6, #4
    sub r7, #1
    cmp r7, #0
loop_end:
    bne loop
    halt
"
    )
}

pub fn memory() -> MemoryConfig {
    let mut m = MemoryConfig::new(vec![
        RegionDescriptor::new("flash", RegionKind::Flash, 0, 0x1_0000).cached(),
        RegionDescriptor::new("tcm", RegionKind::Tcm, TCM_TABLE, 0x1000),
        RegionDescriptor::new("ram", RegionKind::Ram, OUT, 0x1_0000),
        RegionDescriptor::new("sram", RegionKind::Ram, SRAM_TABLE, 0x1000).cached(),
    ]);
    m.icache = Some(CacheConfig::default());
    m.dcache = Some(CacheConfig::default());
    m
}

fn table(seed: u32, words: u32) -> Vec<Addr> {
    (0..words)
        .map(|k| Addr::Num((k + 1).wrapping_mul(0x9E37_79B9) ^ seed))
        .collect()
}

pub fn config(p: &Params) -> RunConfig {
    let mut c = RunConfig::new(ProgramConfig::inline(
        program(p.iterations, p.words),
        LoadMode::Movw,
    ));
    c.name = "soft_error/golden".into();
    c.memory = memory();
    c.init = vec![
        MemInit {
            address: Addr::Num(TCM_TABLE),
            words: table(0x5A5A_0000, p.words),
        },
        MemInit {
            address: Addr::Num(SRAM_TABLE),
            words: table(0x0000_A5A5, p.words),
        },
    ];
    c
}

fn extra_cycle_range(c: &CampaignReport) -> serde_json::Value {
    let extras: Vec<u64> = c
        .runs
        .iter()
        .filter_map(|r| match r.result {
            crate::harness::InjectionResult::Corrected { extra_cycles } => Some(extra_cycles),
            _ => None,
        })
        .collect();
    json!({
        "min": extras.iter().min(),
        "max": extras.iter().max(),
    })
}

pub fn run(p: &Params) -> Result<ScenarioOutput, ConfigError> {
    if p.iterations < 3 || p.iterations > 0xFFF {
        return Err(ConfigError::new("iterations", "must be in 3..=4095"));
    }
    if p.words == 0 || p.words > 0x400 {
        return Err(ConfigError::new("words", "must be in 1..=1024"));
    }
    let mut report = ScenarioReport::new("soft_error", p);
    let cfg = config(p);
    let prepared = cfg.prepare()?;
    let golden = run_config(&cfg)?;

    // Inject between the end of the first pass and the start of the last,
    // so every structure the loop uses is loaded and will be read again.
    let loop_end = prepared.image.symbol("loop_end").unwrap_or(0);
    let loop_start = prepared.image.symbol("loop").unwrap_or(0);
    let passes: Vec<u64> = golden
        .trace
        .records()
        .iter()
        .filter(|r| r.event == TraceKind::Retire && r.pc == loop_end)
        .map(|r| r.cycle)
        .collect();
    let window = [passes[0], passes[passes.len() - 2]];
    let words = 4 * p.words;
    let spec = |target, count| CampaignSpec {
        seed: p.seed,
        count,
        target,
        window: Some(window),
        icache_range: Some([Addr::Num(loop_start), Addr::Num(loop_end + 2)]),
        dcache_range: Some([Addr::Num(SRAM_TABLE), Addr::Num(SRAM_TABLE + words)]),
        tcm_range: Some([Addr::Num(TCM_TABLE), Addr::Num(TCM_TABLE + words)]),
    };

    report.check(Assertion::new(
        "golden_run_completes",
        golden.report.pass,
        format!("{:?}", golden.report.status),
    ));
    let mut campaigns = serde_json::Map::new();
    let mut ranges = serde_json::Map::new();
    for (name, target, count) in [
        ("icache", CampaignTarget::Icache, p.icache),
        ("tcm", CampaignTarget::Tcm, p.tcm),
        ("dcache", CampaignTarget::Dcache, p.dcache),
        ("mixed", CampaignTarget::Mixed, p.mixed),
    ] {
        if count == 0 {
            continue;
        }
        let c = run_campaign(&prepared, &spec(target, count))?;
        let recovered = match target {
            CampaignTarget::Icache | CampaignTarget::Tcm => c.count_of("corrected"),
            CampaignTarget::Dcache => c.count_of("precise_abort"),
            CampaignTarget::Mixed => c.count_of("corrected") + c.count_of("precise_abort"),
        };
        let what = match target {
            CampaignTarget::Dcache => "precise aborts",
            CampaignTarget::Mixed => "corrected runs or precise aborts",
            _ => "output-equal runs with extra cycles",
        };
        report.check(Assertion::new(
            format!("{name}_campaign"),
            recovered == count,
            format!("{recovered}/{count} {what}; tally {:?}", c.tally),
        ));
        if target == CampaignTarget::Mixed {
            let again = run_campaign(&prepared, &spec(target, count))?;
            report.check(Assertion::new(
                "mixed_campaign_replays",
                again == c,
                "second run with the same seed compared",
            ));
        }
        ranges.insert(name.into(), extra_cycle_range(&c));
        campaigns.insert(name.into(), serde_json::to_value(&c).unwrap_or_default());
    }

    report.metrics = json!({
        "golden_cycles": golden.report.cycles,
        "window": window,
        "extra_cycles": ranges,
        "campaigns": campaigns,
    });
    let traces = vec![("golden".to_string(), golden.trace)];
    report.runs.insert("golden".into(), golden.report);
    Ok(ScenarioOutput { report, traces })
}
