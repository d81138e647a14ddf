//! Two unprivileged tasks with private 128-byte regions, switched round
//! robin by a timer handler that swaps their saved frames and reprograms
//! the task region. Each task stores to its own region and probes the
//! other's; a fault handler skips denied stores.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ScenarioOutput, ScenarioReport};
use crate::asm::{LoadMode, ProgramImage};
use crate::harness::config::default_memory;
use crate::harness::report::Assertion;
use crate::harness::{
    run as run_config, Addr, ConfigError, MemInit, MpuRegionSetting, MpuSettings, ProgramConfig,
    RunConfig,
};
use crate::isa::MemSize;
use crate::machine::{FaultRecord, Machine, Stimulus, CONTROL, MPU_RNR};
use crate::mpu::{MpuRegion, Perms, Rwx};
use crate::nvic::LineConfig;
use crate::trace::TraceKind;

pub const REGION_A: u32 = 0x2000_1000;
pub const REGION_B: u32 = 0x2000_1080;
pub const REGION_SIZE: u32 = 128;
const SAVE_A: u32 = 0x2000_2000;
const SAVE_B: u32 = 0x2000_2020;
const CURRENT: u32 = 0x2000_2040;
const DONE_OFFSET: u32 = REGION_SIZE - 4;
pub const TAG_A: u32 = 0xA0;
pub const TAG_B: u32 = 0xB0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub mpu_enabled: bool,
    /// Probes per task: alternately own-region and other-region words.
    pub probes_per_task: u32,
    /// Timer period in cycles.
    pub timeslice: u64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            mpu_enabled: true,
            probes_per_task: 32,
            timeslice: 200,
        }
    }
}

fn task_region() -> Perms {
    Perms {
        privileged: Rwx::RWX,
        unprivileged: Rwx::RW,
    }
}

/// Per-task probe addresses, in execution order.
pub fn probes(own: u32, other: u32, count: u32) -> Vec<u32> {
    (0..count)
        .map(|i| if i % 2 == 0 { own } else { other } + 4 * (i / 2))
        .collect()
}

fn task(name: &str, table: &str, count: u32, tag: u32, region: u32) -> String {
    format!(
        "\
task_{name}:
    ldr r0, ={table}
    mov r1, #{count}
    mov r3, #{tag:#x}
loop_{name}:
    ldr r2, [r0]
probe_{name}:
    str r3, [r2]
    add r0, #4
    sub r1, #1
    cmp r1, #0
    bne loop_{name}
    ldr r2, ={done:#x}
    mov r3, #1
    str r3, [r2]
spin_{name}:
    b spin_{name}
task_{name}_end:
",
        done = region + DONE_OFFSET
    )
}

pub fn program(p: &Params) -> String {
    let n = p.probes_per_task;
    let rasr = MpuRegion::new(REGION_A, REGION_SIZE as u64, task_region()).attr_bits();
    let words = |v: Vec<u32>| {
        v.iter()
            .map(|a| format!("{a:#x}"))
            .collect::<Vec<_>>()
            .join(", ")
    };
    format!(
        "\
vectors: .word timer, fault
start:
    ldr r0, ={CONTROL:#x}
    mov r1, #1
    str r1, [r0]            ; thread mode drops privilege
    b task_a
{task_a}{task_b}
fault:
    ldr r4, [sp, #24]
    add r4, #2              ; skip the denied 16-bit store
    str r4, [sp, #24]
    bx lr
timer:
    ldr r4, ={done_a:#x}
    ldr r5, [r4]
    ldr r4, ={done_b:#x}
    ldr r6, [r4]
    and r5, r5, r6
    cmp r5, #1
    bne switch
    halt
switch:
    ldr r4, ={CURRENT:#x}
    ldr r5, [r4]
    cmp r5, #0
    bne from_b
    ldr r6, ={SAVE_A:#x}
    ldr r7, ={SAVE_B:#x}
    ldr r8, ={REGION_B:#x}
    mov r5, #1
    b swap
from_b:
    ldr r6, ={SAVE_B:#x}
    ldr r7, ={SAVE_A:#x}
    ldr r8, ={REGION_A:#x}
    mov r5, #0
swap:
    str r5, [r4]
    mov r9, sp
    ldm r9!, {{r0-r3}}
    stm r6!, {{r0-r3}}
    ldm r9!, {{r0-r3}}
    stm r6!, {{r0-r3}}
    mov r9, sp
    ldm r7!, {{r0-r3}}
    stm r9!, {{r0-r3}}
    ldm r7!, {{r0-r3}}
    stm r9!, {{r0-r3}}
    ldr r0, ={MPU_RNR:#x}
    mov r1, #1
    str r1, [r0]
    str r8, [r0, #4]
    ldr r1, ={rasr:#x}
    str r1, [r0, #8]
    bx lr
probes_a: .word {pa}
probes_b: .word {pb}
",
        task_a = task("a", "probes_a", n, TAG_A, REGION_A),
        task_b = task("b", "probes_b", n, TAG_B, REGION_B),
        done_a = REGION_A + DONE_OFFSET,
        done_b = REGION_B + DONE_OFFSET,
        pa = words(probes(REGION_A, REGION_B, n)),
        pb = words(probes(REGION_B, REGION_A, n)),
    )
}

pub fn config(p: &Params) -> RunConfig {
    let mut c = RunConfig::new(ProgramConfig::inline(program(p), LoadMode::Movw));
    c.name = if p.mpu_enabled {
        "mpu_isolation/enabled"
    } else {
        "mpu_isolation/disabled"
    }
    .into();
    c.memory = default_memory();
    c.mpu = MpuSettings {
        enabled: p.mpu_enabled,
        background: true,
        regions: vec![
            MpuRegionSetting {
                index: 0,
                base: Addr::Num(0),
                size: 0x1_0000,
                perms: Perms {
                    privileged: Rwx::RX,
                    unprivileged: Rwx::RX,
                },
            },
            MpuRegionSetting {
                index: 1,
                base: Addr::Num(REGION_A),
                size: REGION_SIZE as u64,
                perms: task_region(),
            },
        ],
    };
    c.lines = vec![LineConfig::default()];
    c.vector_table = Some(Addr::from("vectors"));
    c.stimuli = vec![Stimulus {
        line: 0,
        at_cycle: Some(p.timeslice),
        at_instruction: None,
        period: Some(p.timeslice),
        repeat: None,
    }];
    // Task B's first frame: registers zero, return address task_b.
    let frame = [0, 0, 0, 0, 0, 0, 1, 0].map(|slot| {
        if slot == 1 {
            Addr::from("task_b")
        } else {
            Addr::Num(0)
        }
    });
    c.init = vec![MemInit {
        address: Addr::Num(SAVE_B),
        words: frame.to_vec(),
    }];
    c
}

/// Task whose code holds `pc`, from the program's label ranges.
pub fn task_of(image: &ProgramImage, pc: u32) -> Option<&'static str> {
    let within = |name: &str| {
        let (Some(a), Some(b)) = (
            image.symbol(&format!("task_{name}")),
            image.symbol(&format!("task_{name}_end")),
        ) else {
            return false;
        };
        (a..b).contains(&pc)
    };
    ["a", "b"].into_iter().find(|t| within(t))
}

fn region_words(m: &Machine, base: u32, n: u32) -> Vec<u32> {
    (0..n)
        .map(|i| m.mem.peek(base + 4 * i, MemSize::Word).unwrap_or(0))
        .collect()
}

pub fn run(p: &Params) -> Result<ScenarioOutput, ConfigError> {
    if p.probes_per_task == 0 || p.probes_per_task > 2 * (DONE_OFFSET / 4) {
        return Err(ConfigError::new("probes_per_task", "must be in 1..=62"));
    }
    if p.timeslice < 50 {
        return Err(ConfigError::new("timeslice", "must be at least 50 cycles"));
    }
    let mut report = ScenarioReport::new("mpu_isolation", p);
    let cfg = config(p);
    let prepared = cfg.prepare()?;
    let image = &prepared.image;
    let outcome = run_config(&cfg)?;
    let mut m = prepared.boot()?;
    m.run();

    let n = p.probes_per_task;
    let mut expected: Vec<(&str, u32)> = Vec::new();
    let mut probe_count = 0;
    for (task, own, other) in [("a", REGION_A, REGION_B), ("b", REGION_B, REGION_A)] {
        for addr in probes(own, other, n) {
            probe_count += 1;
            let in_own = (own..own + REGION_SIZE).contains(&addr);
            if p.mpu_enabled && !in_own {
                expected.push((task, addr));
            }
        }
    }
    let named = |f: &FaultRecord| (task_of(image, f.pc).unwrap_or("?"), f.fault.address);
    let mut observed: Vec<(&str, u32)> = m.faults.iter().map(named).collect();
    observed.sort();
    expected.sort();

    let probe_stores = |t: &str| {
        let pc = image.symbol(&format!("probe_{t}")).unwrap_or(0);
        m.trace
            .records()
            .iter()
            .filter(|r| r.event == TraceKind::Retire && r.pc == pc)
            .count() as u32
    };
    let stores = probe_stores("a") + probe_stores("b");
    let own_pairs = n.div_ceil(2);
    let cross_pairs = n / 2;
    let a_words = region_words(&m, REGION_A, own_pairs);
    let b_words = region_words(&m, REGION_B, own_pairs);

    report.check(Assertion::new(
        "probe_store_is_16_bit",
        ["a", "b"].iter().all(|t| {
            image
                .symbol(&format!("probe_{t}"))
                .and_then(|a| image.instruction_at(a))
                .is_some_and(|i| i.width_bits == 16)
        }),
        "the fault handler skips two bytes",
    ));
    report.check(Assertion::new(
        "both_tasks_finish",
        outcome.report.pass,
        format!("{:?}", outcome.report.halt),
    ));
    report.check(Assertion::eq(
        "fault_pattern_matches_region_map",
        observed.clone(),
        expected.clone(),
    ));
    report.check(Assertion::eq(
        "allowed_stores_retire",
        stores,
        probe_count - expected.len() as u32,
    ));
    if p.mpu_enabled {
        report.check(Assertion::new(
            "no_cross_region_write_lands",
            a_words.iter().all(|&w| w == TAG_A) && b_words.iter().all(|&w| w == TAG_B),
            format!("region a {a_words:x?}, region b {b_words:x?}"),
        ));
        report.check(Assertion::new(
            "fault_records_name_task_and_address",
            m.faults
                .iter()
                .all(|f| task_of(image, f.pc).is_some() && f.fault.kind.is_mpu() && !f.privileged),
            format!("{} fault records", m.faults.len()),
        ));
    } else {
        report.check(Assertion::eq("no_faults_when_disabled", m.faults.len(), 0));
    }

    let faults: Vec<_> = m
        .faults
        .iter()
        .map(|f| {
            json!({
                "task": task_of(image, f.pc),
                "pc": f.pc,
                "address": f.fault.address,
                "kind": f.fault.kind,
                "cycle": f.cycle,
            })
        })
        .collect();
    report.metrics = json!({
        "probes": probe_count,
        "cross_region_probes": 2 * cross_pairs,
        "faults": faults,
        "allowed_stores": stores,
        "context_switches": outcome.report.events.stackings - m.faults.len() as u64,
        "regions": {
            "a": { "base": REGION_A, "size": REGION_SIZE },
            "b": { "base": REGION_B, "size": REGION_SIZE },
        },
    });
    let traces = vec![("run".to_string(), outcome.trace)];
    report.runs.insert("run".into(), outcome.report);
    Ok(ScenarioOutput { report, traces })
}
