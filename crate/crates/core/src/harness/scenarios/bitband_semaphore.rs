//! A shared flag byte updated by a main loop and by an interrupt handler,
//! with the handler placed at every instruction boundary of the loop.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ScenarioOutput, ScenarioReport};
use crate::asm::LoadMode;
use crate::harness::config::default_memory;
use crate::harness::report::Assertion;
use crate::harness::{run as run_config, Addr, ConfigError, ProgramConfig, RunConfig};
use crate::isa::{MemSize, Op};
use crate::machine::Stimulus;
use crate::memory::{RegionDescriptor, RegionKind};
use crate::nvic::LineConfig;
use crate::trace::TraceKind;

pub const SHARED: u32 = 0x2010_0000;
pub const ALIAS_BASE: u32 = 0x2200_0000;
pub const MAX_EVENTS: u64 = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// Passes of the main loop; each pass sets bit 3 again.
    pub iterations: u32,
}

impl Default for Params {
    fn default() -> Self {
        Params { iterations: 2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Main sets bit 3, handler sets bit 5, both through the alias.
    Alias,
    /// Both sides load, OR and store the whole byte.
    ReadModifyWrite,
    /// Main sets bit 3 through the alias, handler clears it the same way.
    AliasClear,
}

const fn alias(bit: u32) -> u32 {
    ALIAS_BASE + bit
}

pub fn program(v: Variant, iterations: u32) -> String {
    let head = "vectors: .word isr, 0\nstart:\n";
    let tail = "    sub r4, #1\n    cmp r4, #0\n    bne again\n    halt\n";
    match v {
        Variant::Alias | Variant::AliasClear => {
            let (bit, value) = if v == Variant::Alias { (5, 1) } else { (3, 0) };
            format!(
                "{head}    ldr r0, ={:#x}\n    mov r1, #1\n    mov r4, #{iterations}\nagain:\n\
                 \x20   strb r1, [r0]\n{tail}\
                 isr:\n    ldr r2, ={:#x}\n    mov r3, #{value}\n    strb r3, [r2]\n    bx lr\n",
                alias(3),
                alias(bit),
            )
        }
        Variant::ReadModifyWrite => format!(
            "{head}    ldr r0, ={SHARED:#x}\n    mov r2, #0x08\n    mov r4, #{iterations}\nagain:\n\
             \x20   ldrb r1, [r0]\n    orr r1, r1, r2\n    strb r1, [r0]\n{tail}\
             isr:\n    ldr r0, ={SHARED:#x}\n    ldrb r1, [r0]\n    mov r2, #0x20\n\
             \x20   orr r1, r1, r2\n    strb r1, [r0]\n    bx lr\n"
        ),
    }
}

pub fn config(v: Variant, iterations: u32, isr_before: Option<u64>) -> RunConfig {
    let mut c = RunConfig::new(ProgramConfig::inline(
        program(v, iterations),
        LoadMode::Pool,
    ));
    c.name = format!("bitband_semaphore/{v:?}");
    c.memory = default_memory();
    c.memory.regions.push(RegionDescriptor::new(
        "shared",
        RegionKind::BitbandTarget,
        SHARED,
        0x100,
    ));
    c.memory.regions.push(RegionDescriptor::new(
        "alias",
        RegionKind::BitbandAlias,
        ALIAS_BASE,
        0x800,
    ));
    c.lines = vec![LineConfig::default()];
    c.vector_table = Some(Addr::from("vectors"));
    c.stimuli = isr_before
        .map(|k| vec![Stimulus::at_instruction(0, k)])
        .unwrap_or_default();
    c
}

struct Enumeration {
    events: u64,
    /// Final flag byte with the handler run before main event `k`.
    bytes: Vec<u8>,
    all_entered_once: bool,
    /// Event indices of main's stores to the flag.
    store_events: Vec<u64>,
}

fn enumerate(v: Variant, iterations: u32) -> Result<(Enumeration, RunConfig), ConfigError> {
    let golden_cfg = config(v, iterations, None);
    let golden = run_config(&golden_cfg)?;
    let image = golden_cfg.prepare()?.image;
    let store_events = golden
        .trace
        .records()
        .iter()
        .filter(|r| r.event == TraceKind::Retire)
        .enumerate()
        .filter(|(_, r)| {
            image
                .instruction_at(r.pc)
                .is_some_and(|i| matches!(i.op, Op::Store { .. }))
        })
        .map(|(k, _)| k as u64)
        .collect();
    let events = golden.report.retired;
    let mut bytes = Vec::new();
    let mut all_entered_once = true;
    for k in 0..events {
        let mut cfg = config(v, iterations, Some(k));
        cfg.trace = false;
        let prepared = cfg.prepare()?;
        let mut m = prepared.boot()?;
        m.run();
        all_entered_once &= m.trace.count(TraceKind::IrqEntry) == 1;
        bytes.push(m.mem.peek(SHARED, MemSize::Byte).unwrap_or(0) as u8);
    }
    Ok((
        Enumeration {
            events,
            bytes,
            all_entered_once,
            store_events,
        },
        golden_cfg,
    ))
}

pub fn run(p: &Params) -> Result<ScenarioOutput, ConfigError> {
    if p.iterations == 0 {
        return Err(ConfigError::new("iterations", "must be positive"));
    }
    let mut report = ScenarioReport::new("bitband_semaphore", p);
    let (alias, alias_cfg) = enumerate(Variant::Alias, p.iterations)?;
    let (rmw, _) = enumerate(Variant::ReadModifyWrite, p.iterations)?;
    let (clear, _) = enumerate(Variant::AliasClear, p.iterations)?;

    let longest = alias.events.max(rmw.events).max(clear.events);
    report.check(Assertion::new(
        "main_loop_within_event_budget",
        longest <= MAX_EVENTS,
        format!("longest main loop retires {longest} instructions"),
    ));
    report.check(Assertion::new(
        "handler_ran_once_per_interleaving",
        alias.all_entered_once && rmw.all_entered_once && clear.all_entered_once,
        "one exception entry per run",
    ));
    let alias_ok = alias.bytes.iter().filter(|&&b| b == 0x28).count();
    report.check(Assertion::eq(
        "alias_sets_both_bits_in_every_interleaving",
        alias_ok as u64,
        alias.events,
    ));
    let lost: Vec<u64> = (0..rmw.events)
        .filter(|&k| rmw.bytes[k as usize] != 0x28)
        .collect();
    report.check(Assertion::new(
        "read_modify_write_loses_an_update",
        !lost.is_empty(),
        format!("lost update with the handler before events {lost:?}"),
    ));
    let last_store = clear.store_events.last().copied().unwrap_or(0);
    let expected: Vec<u8> = (0..clear.events)
        .map(|k| if k <= last_store { 0x08 } else { 0x00 })
        .collect();
    report.check(Assertion::eq(
        "clear_follows_event_order",
        clear.bytes.clone(),
        expected,
    ));

    let table = |e: &Enumeration| {
        json!({
            "events": e.events,
            "bytes": e.bytes,
            "main_store_events": e.store_events,
        })
    };
    report.metrics = json!({
        "alias": table(&alias),
        "read_modify_write": table(&rmw),
        "alias_clear": table(&clear),
        "lost_update_boundaries": lost,
    });

    let mut mid = alias_cfg.clone();
    mid.stimuli = vec![Stimulus::at_instruction(0, alias.events / 2)];
    let sample = run_config(&mid)?;
    let traces = vec![("alias_mid".to_string(), sample.trace)];
    report.runs.insert("alias_mid".into(), sample.report);
    Ok(ScenarioOutput { report, traces })
}
