//! Constant-heavy loop built in both constant-load modes and run over the
//! same uncached flash timing.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{same_registers, ScenarioOutput, ScenarioReport};
use crate::asm::LoadMode;
use crate::harness::config::default_memory;
use crate::harness::report::Assertion;
use crate::harness::{run as run_config, ConfigError, ProgramConfig, RunConfig, RunOutcome};
use crate::memory::flash::FlashTiming;
use crate::trace::TraceKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub flash: FlashTiming,
    /// Constant loads per loop iteration.
    pub blocks: u32,
    /// Register-only instructions after each constant load.
    pub filler: u32,
    pub iterations: u32,
    /// Degradation the timing search looks for, in percent.
    pub target_percent: f64,
    /// Largest non-sequential flash cost tried by the search.
    pub sweep_max_nonsequential: u32,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            flash: FlashTiming::default(),
            blocks: 4,
            filler: 5,
            iterations: 50,
            target_percent: 15.0,
            sweep_max_nonsequential: 12,
        }
    }
}

/// `blocks` constant loads per iteration, each followed by `filler`
/// register-only instructions.
pub fn program(blocks: u32, filler: u32, iterations: u32) -> String {
    let mut s = format!(
        "start:\n    mov r7, #{iterations}\n    mov r0, #0\n    mov r5, #0\n    mov r6, #0\nloop:\n"
    );
    for k in 0..blocks {
        let r = 1 + k % 4;
        let value = 0x1234_5000u32.wrapping_add(k.wrapping_mul(0x0102_0304));
        s += &format!("    ldr r{r}, ={value:#010x}\n");
        for j in 0..filler {
            s += &match j % 3 {
                0 => format!("    add r0, r0, r{r}\n"),
                1 => "    eor r6, r6, r0\n".to_string(),
                _ => "    add r5, #1\n".to_string(),
            };
        }
    }
    s += "    sub r7, #1\n    cmp r7, #0\n    bne loop\n    halt\n";
    s
}

pub fn config(p: &Params, blocks: u32, mode: LoadMode, flash: FlashTiming) -> RunConfig {
    let mut c = RunConfig::new(ProgramConfig::inline(
        program(blocks, p.filler, p.iterations),
        mode,
    ));
    c.name = format!("literal_pool/{mode}");
    c.memory = default_memory();
    c.memory.flash = flash;
    c
}

fn pair(
    p: &Params,
    blocks: u32,
    flash: FlashTiming,
    trace: bool,
) -> Result<(RunOutcome, RunOutcome), ConfigError> {
    let mut pool = config(p, blocks, LoadMode::Pool, flash);
    let mut movw = config(p, blocks, LoadMode::Movw, flash);
    pool.trace = trace;
    movw.trace = trace;
    Ok((run_config(&pool)?, run_config(&movw)?))
}

pub fn degradation_percent(pool: u64, movw: u64) -> f64 {
    if movw == 0 {
        return 0.0;
    }
    (pool as f64 - movw as f64) * 100.0 / movw as f64
}

/// Extra cycles one executed pool load costs over the MOVW/MOVH pair: the
/// load's own fetch, the data read that breaks the stream, and the
/// restarted fetch after it, against two sequential wide fetches.
pub fn pool_load_penalty(flash: &FlashTiming, load_bytes: u32) -> i64 {
    let s = flash.sequential_cycles as i64;
    let n = flash.nonsequential_cycles as i64;
    let beats = |len: u32| len.div_ceil(flash.fetch_width).max(1) as i64;
    let pool = s * beats(load_bytes) + 1 + (n + (beats(4) - 1) * s) + (n - s);
    let movw = 2 * (s * beats(4) + 1);
    pool - movw
}

pub fn run(p: &Params) -> Result<ScenarioOutput, ConfigError> {
    if p.iterations == 0 || p.iterations > 0xFFF {
        return Err(ConfigError::new("iterations", "must be in 1..=4095"));
    }
    if p.blocks > 200 {
        return Err(ConfigError::new("blocks", "at most 200 (pool reach)"));
    }
    p.flash
        .validate()
        .map_err(|e| ConfigError::new("flash", e))?;
    let mut report = ScenarioReport::new("literal_pool", p);

    let (pool, movw) = pair(p, p.blocks, p.flash, true)?;
    let margin = pool.report.cycles as i64 - movw.report.cycles as i64;
    let pool_image =
        crate::asm::assemble(&program(p.blocks, p.filler, p.iterations), LoadMode::Pool)
            .map_err(|e| ConfigError::new("program", e))?;
    let mut loads = 0u64;
    let mut predicted = 0i64;
    for r in pool.trace.records() {
        if r.event != TraceKind::Retire {
            continue;
        }
        if let Some(i) = pool_image.instruction_at(r.pc).filter(|i| i.literal) {
            loads += 1;
            predicted += pool_load_penalty(&p.flash, i.width_bits / 8);
        }
    }
    let degradation = degradation_percent(pool.report.cycles, movw.report.cycles);

    let (zpool, zmovw) = pair(p, 0, p.flash, false)?;
    let zero = degradation_percent(zpool.report.cycles, zmovw.report.cycles);

    let mut sweep = Vec::new();
    let mut found = None;
    for n in p.flash.sequential_cycles..=p.sweep_max_nonsequential {
        let flash = FlashTiming {
            nonsequential_cycles: n,
            ..p.flash
        };
        let (a, b) = pair(p, p.blocks, flash, false)?;
        let d = degradation_percent(a.report.cycles, b.report.cycles);
        sweep.push(json!({
            "nonsequential_cycles": n,
            "pool_cycles": a.report.cycles,
            "movw_cycles": b.report.cycles,
            "degradation_percent": d,
        }));
        if found.is_none() && d >= p.target_percent {
            found = Some((flash, d));
        }
    }

    report.check(Assertion::new(
        "both_modes_halt",
        pool.report.pass && movw.report.pass,
        format!("{:?} / {:?}", pool.report.status, movw.report.status),
    ));
    report.check(Assertion::new(
        "modes_compute_the_same_result",
        same_registers(&pool.report, &movw.report),
        "r0-r12 compared",
    ));
    report.check(Assertion::eq("margin_matches_ledger", margin, predicted));
    report.check(Assertion::eq(
        "no_constant_loads_no_penalty",
        zpool.report.cycles,
        zmovw.report.cycles,
    ));
    report.check(Assertion::new(
        "timing_reaching_target_exists",
        found.is_some(),
        match found {
            Some((f, d)) => format!(
                "nonsequential_cycles = {} gives {d:.2}%",
                f.nonsequential_cycles
            ),
            None => "no swept timing reached the target".into(),
        },
    ));

    report.metrics = json!({
        "pool_cycles": pool.report.cycles,
        "movw_cycles": movw.report.cycles,
        "margin_cycles": margin,
        "predicted_margin_cycles": predicted,
        "pool_loads_executed": loads,
        "penalty_per_load": pool_load_penalty(&p.flash, 2),
        "degradation_percent": degradation,
        "zero_loads": {
            "pool_cycles": zpool.report.cycles,
            "movw_cycles": zmovw.report.cycles,
            "degradation_percent": zero,
        },
        "sweep": sweep,
        "reaching_target": found.map(|(f, d)| json!({ "flash": f, "degradation_percent": d })),
    });
    let traces = vec![
        ("pool".to_string(), pool.trace),
        ("movw".to_string(), movw.trace),
    ];
    report.runs.insert("pool".into(), pool.report);
    report.runs.insert("movw".into(), movw.report);
    Ok(ScenarioOutput { report, traces })
}
