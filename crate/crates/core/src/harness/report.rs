use std::collections::BTreeMap;

use serde::Serialize;

use super::campaign::{run_campaign, CampaignReport};
use super::config::{Prepared, When};
use super::ConfigError;
use crate::asm::{parse_register, CodeSizeReport};
use crate::isa::MemSize;
use crate::machine::{FaultRecord, HaltReason, Machine};
use crate::memory::{InjectOutcome, SoftErrorInjection};
use crate::trace::{Trace, TraceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Halted,
    Breakpoint,
    Timeout,
    Fault,
}

impl RunStatus {
    pub fn of(h: &HaltReason) -> RunStatus {
        match h {
            HaltReason::Halt => RunStatus::Halted,
            HaltReason::Breakpoint { .. } => RunStatus::Breakpoint,
            HaltReason::CycleLimit { .. } => RunStatus::Timeout,
            _ => RunStatus::Fault,
        }
    }
}

/// Name of a halt reason as it appears in reports (`halt`, `cycle_limit`...).
pub fn halt_name(h: &HaltReason) -> String {
    serde_json::to_value(h)
        .ok()
        .and_then(|v| v["reason"].as_str().map(str::to_string))
        .unwrap_or_default()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EventCounts {
    pub retired: u64,
    pub fetch_nonseq: u64,
    pub misses: u64,
    pub fills: u64,
    pub stackings: u64,
    pub tail_chains: u64,
    pub unstacks: u64,
    pub aborts: u64,
    pub repairs: u64,
    pub mpu_faults: u64,
    pub bitband_writes: u64,
    pub breakpoints: u64,
    pub div_by_zero: u64,
    pub ldm_interrupted: u64,
    pub pends: u64,
    pub injections: u64,
}

impl EventCounts {
    pub fn of(t: &Trace) -> EventCounts {
        EventCounts {
            retired: t.count(TraceKind::Retire),
            fetch_nonseq: t.count(TraceKind::FetchNonseq),
            misses: t.count(TraceKind::Miss),
            fills: t.count(TraceKind::Fill),
            stackings: t.count(TraceKind::IrqEntry),
            tail_chains: t.count(TraceKind::TailChain),
            unstacks: t.count(TraceKind::IrqExit),
            aborts: t.count(TraceKind::Abort),
            repairs: t.count(TraceKind::Repair),
            mpu_faults: t.count(TraceKind::MpuFault),
            bitband_writes: t.count(TraceKind::BitbandWrite),
            breakpoints: t.count(TraceKind::Breakpoint),
            div_by_zero: t.count(TraceKind::DivByZero),
            ldm_interrupted: t.count(TraceKind::LdmInterrupted),
            pends: t.count(TraceKind::Pend),
            injections: t.count(TraceKind::Inject),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Assertion {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Assertion {
        Assertion {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }

    pub fn eq<T: PartialEq + std::fmt::Debug>(name: &str, got: T, want: T) -> Assertion {
        let pass = got == want;
        Assertion::new(name, pass, format!("got {got:?}, expected {want:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InjectionReport {
    pub cycle: u64,
    pub retired: u64,
    pub error: SoftErrorInjection,
    pub outcome: InjectOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub name: String,
    pub status: RunStatus,
    pub halt: HaltReason,
    pub cycles: u64,
    pub retired: u64,
    pub code_size: CodeSizeReport,
    pub events: EventCounts,
    /// Cycles charged to each trace event kind; sums to `cycles`.
    pub event_cycles: BTreeMap<String, u64>,
    /// r0..r12, sp, lr, pc.
    pub registers: Vec<u32>,
    /// Set flags as upper-case letters, e.g. `nZCv`.
    pub flags: String,
    pub faults: Vec<FaultRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub injections: Vec<InjectionReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub campaign: Option<CampaignReport>,
    pub assertions: Vec<Assertion>,
    pub pass: bool,
}

impl RunReport {
    pub fn from_machine(p: &Prepared, m: &Machine, halt: HaltReason) -> RunReport {
        let f = m.cpu.flags;
        let flags = [(f.n, 'n'), (f.z, 'z'), (f.c, 'c'), (f.v, 'v')]
            .iter()
            .map(|&(on, ch)| if on { ch.to_ascii_uppercase() } else { ch })
            .collect();
        let event_cycles = m.trace.cycles_by_kind();
        let charged: u64 = event_cycles.values().sum();
        let mut assertions = vec![Assertion::new(
            "ledger_closed",
            charged == m.cycles(),
            format!("{charged} cycles charged to events, {} elapsed", m.cycles()),
        )];
        assertions.extend(check_expectations(p, m, &halt));
        let mut r = RunReport {
            name: p.config.name.clone(),
            status: RunStatus::of(&halt),
            halt,
            cycles: m.cycles(),
            retired: m.retired(),
            code_size: p.image.code_size_report(),
            events: EventCounts::of(&m.trace),
            event_cycles,
            registers: m.cpu.regs.to_vec(),
            flags,
            faults: m.faults.clone(),
            injections: Vec::new(),
            campaign: None,
            assertions,
            pass: false,
        };
        r.settle();
        r
    }

    pub fn push(&mut self, a: Assertion) {
        self.assertions.push(a);
        self.settle();
    }

    fn settle(&mut self) {
        self.pass = self.assertions.iter().all(|a| a.pass);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

fn check_expectations(p: &Prepared, m: &Machine, halt: &HaltReason) -> Vec<Assertion> {
    let mut out = Vec::new();
    let exp = &p.config.expect;
    if !exp.iter().any(|e| e.halt.is_some()) {
        let ok = matches!(halt, HaltReason::Halt | HaltReason::Breakpoint { .. });
        out.push(Assertion::new(
            "completed",
            ok,
            format!("halt reason {}", halt_name(halt)),
        ));
    }
    for (i, e) in exp.iter().enumerate() {
        let name = format!("expect[{i}]");
        if let Some(h) = &e.halt {
            out.push(Assertion::eq(&name, halt_name(halt), h.clone()));
        } else if let Some(r) = &e.register {
            let got = parse_register(r).map(|r| m.cpu.reg(r));
            out.push(Assertion::eq(&name, got, e.equals));
        } else if let Some(a) = &e.memory {
            let got = a
                .resolve(&p.image, &name)
                .ok()
                .and_then(|addr| m.mem.peek(addr, MemSize::Word).ok());
            out.push(Assertion::eq(&name, got, e.equals));
        }
    }
    out
}

pub struct RunOutcome {
    pub report: RunReport,
    pub trace: Trace,
}

impl RunOutcome {
    pub fn trace_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.trace
            .write_jsonl(&mut buf)
            .expect("writing to memory cannot fail");
        buf
    }
}

/// Runs to completion, applying scheduled injections on the way.
pub(crate) fn drive(
    m: &mut Machine,
    injections: &[(When, SoftErrorInjection)],
) -> (HaltReason, Vec<InjectionReport>) {
    let mut applied = Vec::new();
    for (when, error) in injections {
        let reached = m.run_until(|m| match when {
            When::Cycle(c) => m.cycles() >= *c,
            When::Instruction(n) => m.retired() >= *n,
        });
        if reached.is_some() {
            break;
        }
        let outcome = m.inject(error);
        applied.push(InjectionReport {
            cycle: m.cycles(),
            retired: m.retired(),
            error: *error,
            outcome,
        });
    }
    (m.run(), applied)
}

pub(crate) fn execute(p: &Prepared) -> Result<RunOutcome, ConfigError> {
    let mut m = p.boot()?;
    let (halt, injections) = drive(&mut m, &p.injections);
    let mut report = RunReport::from_machine(p, &m, halt);
    report.injections = injections;
    if let Some(spec) = &p.config.campaign {
        let c = run_campaign(p, spec)?;
        report.push(Assertion::new(
            "campaign_recovered",
            c.all_recovered(),
            format!("{:?}", c.tally),
        ));
        report.campaign = Some(c);
    }
    Ok(RunOutcome {
        report,
        trace: m.trace,
    })
}
