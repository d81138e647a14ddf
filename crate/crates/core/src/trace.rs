//! Cycle-stamped event records.
//!
//! Every cycle the simulator spends is attributed to exactly one record, so
//! the `cycles` fields of a complete trace sum to the total cycle count.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Retire,
    FetchNonseq,
    Miss,
    Fill,
    IrqEntry,
    TailChain,
    IrqExit,
    Abort,
    Repair,
    BitbandWrite,
    MpuFault,
    Breakpoint,
    Pend,
    DivByZero,
    LdmInterrupted,
    Inject,
    Halt,
}

impl TraceKind {
    pub fn name(self) -> &'static str {
        match self {
            TraceKind::Retire => "retire",
            TraceKind::FetchNonseq => "fetch_nonseq",
            TraceKind::Miss => "miss",
            TraceKind::Fill => "fill",
            TraceKind::IrqEntry => "irq_entry",
            TraceKind::TailChain => "tail_chain",
            TraceKind::IrqExit => "irq_exit",
            TraceKind::Abort => "abort",
            TraceKind::Repair => "repair",
            TraceKind::BitbandWrite => "bitband_write",
            TraceKind::MpuFault => "mpu_fault",
            TraceKind::Breakpoint => "breakpoint",
            TraceKind::Pend => "pend",
            TraceKind::DivByZero => "div_by_zero",
            TraceKind::LdmInterrupted => "ldm_interrupted",
            TraceKind::Inject => "inject",
            TraceKind::Halt => "halt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Cycle count when this record's cycles begin.
    pub cycle: u64,
    pub pc: u32,
    pub event: TraceKind,
    pub cycles: u32,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

/// Running cycle total, per-kind counters and (optionally) the records.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    now: u64,
    keep_records: bool,
    records: Vec<TraceRecord>,
    counts: BTreeMap<TraceKind, u64>,
    cycles_by_kind: BTreeMap<TraceKind, u64>,
}

impl Trace {
    pub fn new(keep_records: bool) -> Trace {
        Trace {
            keep_records,
            ..Trace::default()
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn emit(&mut self, event: TraceKind, pc: u32, cycles: u32, detail: Value) {
        *self.counts.entry(event).or_default() += 1;
        *self.cycles_by_kind.entry(event).or_default() += cycles as u64;
        if self.keep_records {
            self.records.push(TraceRecord {
                cycle: self.now,
                pc,
                event,
                cycles,
                detail,
            });
        }
        self.now += cycles as u64;
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn count(&self, kind: TraceKind) -> u64 {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn counts(&self) -> BTreeMap<String, u64> {
        self.counts
            .iter()
            .map(|(k, v)| (k.name().to_string(), *v))
            .collect()
    }

    pub fn cycles_by_kind(&self) -> BTreeMap<String, u64> {
        self.cycles_by_kind
            .iter()
            .map(|(k, v)| (k.name().to_string(), *v))
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn stamps_accumulate_and_close() {
        let mut t = Trace::new(true);
        t.emit(TraceKind::Fill, 0x100, 12, Value::Null);
        t.emit(TraceKind::Retire, 0x100, 2, json!({"op": "ldr"}));
        t.emit(TraceKind::Pend, 0x102, 0, json!({"line": 1}));
        let r = t.records();
        assert_eq!(
            r.iter().map(|r| r.cycle).collect::<Vec<_>>(),
            vec![0, 12, 14]
        );
        assert_eq!(r.iter().map(|r| r.cycles as u64).sum::<u64>(), t.now());
        assert_eq!(t.counts()["retire"], 1);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut t = Trace::new(true);
        t.emit(TraceKind::IrqEntry, 4, 10, json!({"line": 0}));
        t.emit(TraceKind::Retire, 8, 1, Value::Null);
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.lines().nth(1).unwrap().contains("detail"));
        let back: TraceRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(back, t.records()[0]);
    }

    #[test]
    fn counters_without_records() {
        let mut t = Trace::new(false);
        t.emit(TraceKind::Miss, 0, 0, Value::Null);
        assert!(t.records().is_empty());
        assert_eq!(t.count(TraceKind::Miss), 1);
    }
}
