//! Two interrupts pended together versus far apart.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{same_registers, ScenarioOutput, ScenarioReport};
use crate::asm::LoadMode;
use crate::harness::report::Assertion;
use crate::harness::{run as run_config, Addr, ConfigError, ProgramConfig, RunConfig};
use crate::machine::Stimulus;
use crate::nvic::{LineConfig, NvicCosts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    pub costs: NvicCosts,
    /// Thread instructions between the two handlers in the separated run.
    pub gap: u64,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            costs: NvicCosts::default(),
            gap: 2,
        }
    }
}

const FIRST_AT: u64 = 5;
const ISR0_LEN: u64 = 6;

pub const PROGRAM: &str = "\
.org 0x20000000
vectors: .word isr0, isr1, 0
start:
    mov r0, #10
    mov r1, #11
    mov r4, #0
    cmp r0, #10
    nop
    nop
    nop
    nop
    nop
    nop
    nop
    nop
    nop
    nop
    nop
    nop
    halt
isr0:
    mov r0, #0
    mov r1, #0
    mov r12, r1
    cmp r0, #5
    add r4, #1
    bx lr
isr1:
    add r4, #16
    bx lr
";

pub fn config(p: &Params, chained: bool) -> RunConfig {
    let mut c = RunConfig::new(ProgramConfig::inline(PROGRAM, LoadMode::Pool));
    c.name = if chained {
        "tail_chain/chained"
    } else {
        "tail_chain/separated"
    }
    .into();
    c.lines = vec![LineConfig::default(); 2];
    c.costs = p.costs;
    c.vector_table = Some(Addr::from("vectors"));
    let second = if chained {
        FIRST_AT
    } else {
        FIRST_AT + ISR0_LEN + p.gap
    };
    c.stimuli = vec![
        Stimulus::at_instruction(0, FIRST_AT),
        Stimulus::at_instruction(1, second),
    ];
    c
}

pub fn run(p: &Params) -> Result<ScenarioOutput, ConfigError> {
    if p.gap == 0 || p.gap > 10 {
        return Err(ConfigError::new("gap", "must be in 1..=10"));
    }
    let mut report = ScenarioReport::new("tail_chain", p);
    let chained = run_config(&config(p, true))?;
    let separated = run_config(&config(p, false))?;
    let c = &chained.report;
    let s = &separated.report;

    // Vectors sit in single-cycle RAM.
    let vector_fetch = 1;
    let expected = p.costs.entry(vector_fetch) as i64 + p.costs.exit() as i64
        - p.costs.tail_chain(vector_fetch) as i64;
    let saving = s.cycles as i64 - c.cycles as i64;

    report.check(Assertion::new(
        "both_runs_halt",
        c.pass && s.pass,
        format!("{:?} / {:?}", c.status, s.status),
    ));
    report.check(Assertion::eq(
        "chained_stack_tail_unstack",
        (c.events.stackings, c.events.tail_chains, c.events.unstacks),
        (1, 1, 1),
    ));
    report.check(Assertion::eq(
        "separated_stack_tail_unstack",
        (s.events.stackings, s.events.tail_chains, s.events.unstacks),
        (2, 0, 2),
    ));
    report.check(Assertion::new(
        "same_final_state",
        same_registers(c, s) && c.retired == s.retired,
        "r0-r12 and retired count compared",
    ));
    report.check(Assertion::eq("saving_matches_ledger", saving, expected));

    report.metrics = json!({
        "chained_cycles": c.cycles,
        "separated_cycles": s.cycles,
        "saving_cycles": saving,
        "expected_saving_cycles": expected,
    });
    let traces = vec![
        ("chained".to_string(), chained.trace),
        ("separated".to_string(), separated.trace),
    ];
    report.runs.insert("chained".into(), chained.report);
    report.runs.insert("separated".into(), separated.report);
    Ok(ScenarioOutput { report, traces })
}
