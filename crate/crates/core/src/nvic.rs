//! Prioritised interrupt controller with hardware stacking and
//! tail-chaining.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Priority of code running outside any handler.
pub const THREAD_PRIORITY: i32 = 256;
pub const NMI_PRIORITY: i32 = -2;
pub const FAULT_PRIORITY: i32 = -1;
/// Words pushed per exception frame.
pub const FRAME_WORDS: u32 = 8;
/// Link-register value that marks a return from a handler.
pub const EXC_RETURN: u32 = 0xFFFF_FFF9;

pub fn is_exc_return(value: u32) -> bool {
    value >= 0xFFFF_FFF0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NvicCosts {
    pub stacking_cycles: u32,
    pub unstack_cycles: u32,
    pub tailchain_cycles: u32,
    pub pipeline_refill_cycles: u32,
}

impl Default for NvicCosts {
    fn default() -> Self {
        NvicCosts {
            stacking_cycles: 8,
            unstack_cycles: 8,
            tailchain_cycles: 4,
            pipeline_refill_cycles: 2,
        }
    }
}

impl NvicCosts {
    pub fn entry(&self, vector_fetch: u32) -> u32 {
        self.stacking_cycles.max(vector_fetch) + self.pipeline_refill_cycles
    }

    pub fn tail_chain(&self, vector_fetch: u32) -> u32 {
        self.tailchain_cycles.max(vector_fetch) + self.pipeline_refill_cycles
    }

    pub fn exit(&self) -> u32 {
        self.unstack_cycles
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineConfig {
    #[serde(default)]
    pub priority: u8,
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub nmi: bool,
}

fn yes() -> bool {
    true
}

impl Default for LineConfig {
    fn default() -> Self {
        LineConfig {
            priority: 0,
            enabled: true,
            nmi: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct InterruptLine {
    pub enabled: bool,
    pub pending: bool,
    pub active: bool,
    pub priority: u8,
    pub nmi: bool,
}

impl InterruptLine {
    pub fn effective_priority(&self) -> i32 {
        if self.nmi {
            NMI_PRIORITY
        } else {
            self.priority as i32
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exception {
    Line(usize),
    Fault,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NvicError {
    #[error("no interrupt line {0}")]
    NoSuchLine(usize),
    #[error("exception return with no active handler")]
    NothingActive,
}

#[derive(Debug, Clone)]
pub struct Nvic {
    lines: Vec<InterruptLine>,
    active_stack: Vec<Exception>,
    pub costs: NvicCosts,
    pub vector_table_base: u32,
}

impl Nvic {
    /// Drops every pending and active exception; configuration stays.
    pub fn clear_state(&mut self) {
        for l in &mut self.lines {
            l.pending = false;
            l.active = false;
        }
        self.active_stack.clear();
    }

    pub fn new(lines: &[LineConfig], costs: NvicCosts, vector_table_base: u32) -> Nvic {
        Nvic {
            lines: lines
                .iter()
                .map(|l| InterruptLine {
                    enabled: l.enabled,
                    pending: false,
                    active: false,
                    priority: l.priority,
                    nmi: l.nmi,
                })
                .collect(),
            active_stack: Vec::new(),
            costs,
            vector_table_base,
        }
    }

    pub fn line_count(&self) -> usize {
        self.lines.len()
    }

    pub fn line(&self, id: usize) -> Option<&InterruptLine> {
        self.lines.get(id)
    }

    fn line_mut(&mut self, id: usize) -> Result<&mut InterruptLine, NvicError> {
        self.lines.get_mut(id).ok_or(NvicError::NoSuchLine(id))
    }

    pub fn pend(&mut self, id: usize) -> Result<(), NvicError> {
        self.line_mut(id)?.pending = true;
        Ok(())
    }

    pub fn unpend(&mut self, id: usize) -> Result<(), NvicError> {
        self.line_mut(id)?.pending = false;
        Ok(())
    }

    pub fn set_enabled(&mut self, id: usize, enabled: bool) -> Result<(), NvicError> {
        self.line_mut(id)?.enabled = enabled;
        Ok(())
    }

    pub fn set_priority(&mut self, id: usize, priority: u8) -> Result<(), NvicError> {
        self.line_mut(id)?.priority = priority;
        Ok(())
    }

    /// Bit `i` set for each of lines `32*word + i` matching `pred`.
    pub fn bitmap(&self, word: usize, pred: impl Fn(&InterruptLine) -> bool) -> u32 {
        (0..32)
            .filter(|i| self.lines.get(word * 32 + i).is_some_and(&pred))
            .fold(0, |m, i| m | 1 << i)
    }

    pub fn exception_priority(&self, e: Exception) -> i32 {
        match e {
            Exception::Line(id) => self.lines[id].effective_priority(),
            Exception::Fault => FAULT_PRIORITY,
        }
    }

    pub fn current_priority(&self) -> i32 {
        self.active_stack
            .iter()
            .map(|e| self.exception_priority(*e))
            .min()
            .unwrap_or(THREAD_PRIORITY)
    }

    pub fn active_stack(&self) -> &[Exception] {
        &self.active_stack
    }

    pub fn in_handler(&self) -> bool {
        !self.active_stack.is_empty()
    }

    /// The line that would be taken now, given the current execution
    /// priority and the interrupt mask.
    pub fn arbitrate(&self, primask: bool) -> Option<usize> {
        self.arbitrate_against(self.current_priority(), primask)
    }

    pub fn arbitrate_against(&self, current: i32, primask: bool) -> Option<usize> {
        self.lines
            .iter()
            .enumerate()
            .filter(|(_, l)| l.pending && !l.active)
            .filter(|(_, l)| l.nmi || (l.enabled && !primask))
            .filter(|(_, l)| l.effective_priority() < current)
            .min_by_key(|(i, l)| (l.effective_priority(), *i))
            .map(|(i, _)| i)
    }

    /// Marks `e` active; pending state of a line is consumed.
    pub fn activate(&mut self, e: Exception) {
        if let Exception::Line(id) = e {
            let l = &mut self.lines[id];
            l.pending = false;
            l.active = true;
        }
        self.active_stack.push(e);
    }

    /// Retires the innermost active exception.
    pub fn deactivate(&mut self) -> Result<Exception, NvicError> {
        let e = self.active_stack.pop().ok_or(NvicError::NothingActive)?;
        if let Exception::Line(id) = e {
            self.lines[id].active = false;
        }
        Ok(e)
    }

    pub fn vector_address(&self, e: Exception) -> u32 {
        let index = match e {
            Exception::Line(id) => id,
            Exception::Fault => self.lines.len(),
        };
        self.vector_table_base + 4 * index as u32
    }
}

/// The hardware-saved part of the register file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StackedContext {
    pub r0: u32,
    pub r1: u32,
    pub r2: u32,
    pub r3: u32,
    pub r12: u32,
    pub lr: u32,
    pub return_address: u32,
    /// Flags in bits 31..28, predication state in bits 10..0.
    pub status: u32,
}

impl StackedContext {
    pub fn to_words(self) -> [u32; FRAME_WORDS as usize] {
        [
            self.r0,
            self.r1,
            self.r2,
            self.r3,
            self.r12,
            self.lr,
            self.return_address,
            self.status,
        ]
    }

    pub fn from_words(w: [u32; FRAME_WORDS as usize]) -> StackedContext {
        StackedContext {
            r0: w[0],
            r1: w[1],
            r2: w[2],
            r3: w[3],
            r12: w[4],
            lr: w[5],
            return_address: w[6],
            status: w[7],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nvic(prios: &[u8]) -> Nvic {
        let lines: Vec<_> = prios
            .iter()
            .map(|p| LineConfig {
                priority: *p,
                ..LineConfig::default()
            })
            .collect();
        Nvic::new(&lines, NvicCosts::default(), 0)
    }

    #[test]
    fn default_entry_latency() {
        let c = NvicCosts::default();
        assert_eq!(c.entry(5), 10);
        assert_eq!(c.entry(12), 14);
        assert_eq!(c.tail_chain(1), 6);
        assert!(c.tailchain_cycles < c.unstack_cycles + c.stacking_cycles);
    }

    #[test]
    fn pend_is_a_bit() {
        let mut n = nvic(&[0, 0, 0, 0]);
        n.pend(3).unwrap();
        n.pend(3).unwrap();
        assert_eq!(n.arbitrate(false), Some(3));
        n.activate(Exception::Line(3));
        assert_eq!(n.arbitrate(false), None);
        assert_eq!(n.pend(9), Err(NvicError::NoSuchLine(9)));
    }

    #[test]
    fn disabled_line_waits() {
        let mut n = nvic(&[0]);
        n.set_enabled(0, false).unwrap();
        n.pend(0).unwrap();
        assert_eq!(n.arbitrate(false), None);
        n.set_enabled(0, true).unwrap();
        assert_eq!(n.arbitrate(false), Some(0));
    }

    #[test]
    fn arbitration_examples() {
        let mut n = nvic(&[5, 2]);
        n.pend(0).unwrap();
        n.pend(1).unwrap();
        assert_eq!(n.arbitrate(false), Some(1));

        let mut n = nvic(&[5, 2]);
        n.pend(0).unwrap();
        n.activate(Exception::Line(1));
        assert_eq!(n.arbitrate(false), None);

        let mut n = Nvic::new(
            &[
                LineConfig {
                    priority: 5,
                    ..LineConfig::default()
                },
                LineConfig {
                    priority: 0,
                    ..LineConfig::default()
                },
                LineConfig {
                    priority: 200,
                    enabled: false,
                    nmi: true,
                },
            ],
            NvicCosts::default(),
            0,
        );
        n.activate(Exception::Line(1));
        n.pend(0).unwrap();
        n.pend(2).unwrap();
        assert_eq!(n.arbitrate(true), Some(2));
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let mut n = nvic(&[3, 3, 3]);
        n.pend(2).unwrap();
        n.pend(1).unwrap();
        assert_eq!(n.arbitrate(false), Some(1));
    }

    #[test]
    fn fault_preempts_everything_but_nmi() {
        let mut n = nvic(&[0]);
        n.activate(Exception::Fault);
        n.pend(0).unwrap();
        assert_eq!(n.arbitrate(false), None);
        assert_eq!(n.current_priority(), FAULT_PRIORITY);
        n.deactivate().unwrap();
        assert_eq!(n.deactivate(), Err(NvicError::NothingActive));
    }

    #[test]
    fn vectors() {
        let n = Nvic::new(&[LineConfig::default(); 3], NvicCosts::default(), 0x100);
        assert_eq!(n.vector_address(Exception::Line(2)), 0x108);
        assert_eq!(n.vector_address(Exception::Fault), 0x10C);
    }

    #[test]
    fn frame_round_trip() {
        let c = StackedContext {
            r0: 1,
            r1: 2,
            r2: 3,
            r3: 4,
            r12: 5,
            lr: 6,
            return_address: 7,
            status: 8,
        };
        assert_eq!(StackedContext::from_words(c.to_words()), c);
    }

    proptest! {
        #[test]
        fn no_preemption_by_equal_or_lower(prios in prop::collection::vec(0u8..4, 1..5), running in 0usize..4) {
            let running = running % prios.len();
            let mut n = nvic(&prios);
            n.activate(Exception::Line(running));
            for i in 0..prios.len() {
                if i != running {
                    n.pend(i).unwrap();
                }
            }
            if let Some(taken) = n.arbitrate(false) {
                prop_assert!(prios[taken] < prios[running]);
            } else {
                prop_assert!(prios.iter().enumerate().all(|(i, p)| i == running || *p >= prios[running]));
            }
        }
    }

    #[test]
    fn priority_safety_exhaustive() {
        for a in 0u8..3 {
            for b in 0u8..3 {
                for c in 0u8..3 {
                    let prios = [a, b, c];
                    for running in 0..3 {
                        let mut n = nvic(&prios);
                        n.activate(Exception::Line(running));
                        (0..3)
                            .filter(|i| *i != running)
                            .for_each(|i| n.pend(i).unwrap());
                        if let Some(t) = n.arbitrate(false) {
                            assert!(prios[t] < prios[running]);
                        }
                    }
                }
            }
        }
    }
}
