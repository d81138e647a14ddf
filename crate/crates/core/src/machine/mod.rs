//! The simulated core: fetch, decode, execute, exception entry and return.

mod scs;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::isa::encoding::decode;
use crate::isa::{
    eval_cond, exec_bitfield, exec_divide, exec_mov_halves, exec_rbit, it_begin, BitfieldKind,
    Flags, HalfMove, ItState, MemSize, Offset, Op, Operand, Reg, RegList,
};
use crate::memory::{
    CacheSide, FetchFault, InjectOutcome, MapError, MemEventKind, MemFault, MemoryConfig,
    MemorySystem, SoftErrorInjection,
};
use crate::mpu::{AccessKind, Decision, DenyReason, MpuConfig};
use crate::nvic::{
    is_exc_return, Exception, LineConfig, Nvic, NvicCosts, StackedContext, EXC_RETURN,
    FAULT_PRIORITY, FRAME_WORDS,
};
use crate::trace::{Trace, TraceKind};

pub use scs::{
    is_scs, CONTROL, FAULT_ADDRESS, FAULT_STATUS, ICER, ICPR, IPR, ISER, ISPR, MPU_CTRL, MPU_RASR,
    MPU_RBAR, MPU_RNR, PRIMASK,
};

/// Scripted interrupt source. Exactly one of `at_cycle` and
/// `at_instruction` is given; `period` (same unit) repeats the stimulus,
/// `repeat` bounds the number of firings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stimulus {
    pub line: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_cycle: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_instruction: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub period: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat: Option<u64>,
}

impl Stimulus {
    pub fn at_cycle(line: usize, cycle: u64) -> Stimulus {
        Stimulus {
            line,
            at_cycle: Some(cycle),
            at_instruction: None,
            period: None,
            repeat: None,
        }
    }

    pub fn at_instruction(line: usize, count: u64) -> Stimulus {
        Stimulus {
            line,
            at_cycle: None,
            at_instruction: Some(count),
            period: None,
            repeat: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Schedule {
    line: usize,
    by_instruction: bool,
    next: u64,
    period: Option<u64>,
    left: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct MachineConfig {
    pub memory: MemoryConfig,
    pub mpu: MpuConfig,
    pub lines: Vec<LineConfig>,
    pub costs: NvicCosts,
    pub vector_table_base: u32,
    pub stimuli: Vec<Stimulus>,
    pub cycle_limit: u64,
    pub keep_trace: bool,
}

impl MachineConfig {
    pub fn new(memory: MemoryConfig) -> MachineConfig {
        MachineConfig {
            memory,
            mpu: MpuConfig::default(),
            lines: Vec::new(),
            costs: NvicCosts::default(),
            vector_table_base: 0,
            stimuli: Vec::new(),
            cycle_limit: 10_000_000,
            keep_trace: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("memory map: {0}")]
    Memory(#[from] MapError),
    #[error("stimulus {index}: {msg}")]
    Stimulus { index: usize, msg: String },
    #[error("cycle_limit must be positive")]
    CycleLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    MpuNoRegion,
    MpuPermDenied,
    Parity,
    Unaligned,
    Unmapped,
    ReadOnly,
    NotExecutable,
    Undefined,
    ScsPrivilege,
    ScsConfig,
}

impl FaultKind {
    /// Value reported in the fault status register.
    pub fn status_code(self) -> u32 {
        match self {
            FaultKind::MpuNoRegion | FaultKind::MpuPermDenied => 1,
            FaultKind::Parity => 2,
            FaultKind::Unaligned => 3,
            FaultKind::Undefined => 4,
            _ => 5,
        }
    }

    pub fn is_mpu(self) -> bool {
        matches!(self, FaultKind::MpuNoRegion | FaultKind::MpuPermDenied)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuFault {
    pub kind: FaultKind,
    pub address: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub access: Option<AccessKind>,
}

impl CpuFault {
    fn mem(f: MemFault, access: AccessKind) -> CpuFault {
        let kind = match f {
            MemFault::Unmapped(_) => FaultKind::Unmapped,
            MemFault::ReadOnly(_) => FaultKind::ReadOnly,
            MemFault::Unaligned(_) => FaultKind::Unaligned,
            MemFault::NotExecutable(_) => FaultKind::NotExecutable,
            MemFault::ParityAbort(_) => FaultKind::Parity,
        };
        CpuFault {
            kind,
            address: f.address(),
            access: Some(access),
        }
    }

    fn mpu(address: u32, access: AccessKind, reason: DenyReason) -> CpuFault {
        CpuFault {
            kind: match reason {
                DenyReason::NoRegion => FaultKind::MpuNoRegion,
                DenyReason::PermDenied => FaultKind::MpuPermDenied,
            },
            address,
            access: Some(access),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub cycle: u64,
    pub pc: u32,
    #[serde(flatten)]
    pub fault: CpuFault,
    pub privileged: bool,
    /// Whether a fault handler was entered.
    pub handled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum HaltReason {
    Halt,
    Breakpoint { address: u32 },
    FetchFault { address: u32, fault: MemFault },
    UnhandledFault { pc: u32, fault: CpuFault },
    Lockup { pc: u32, fault: CpuFault },
    StackFault { address: u32 },
    VectorFault { address: u32 },
    TableIndex { pc: u32, index: u32, count: u16 },
    ReturnWithoutHandler { pc: u32 },
    CycleLimit { limit: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Retired,
    Exception(Exception),
    Faulted,
    /// A multi-word transfer was abandoned so an interrupt can be taken.
    Interrupted,
    Halted(HaltReason),
}

/// Architectural register state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpuState {
    pub regs: [u32; 16],
    pub flags: Flags,
    pub it: ItState,
    /// Thread-mode privilege is dropped when set.
    pub npriv: bool,
    pub primask: bool,
    pub restart_pc: Option<u32>,
}

impl Default for CpuState {
    fn default() -> Self {
        CpuState {
            regs: [0; 16],
            flags: Flags::default(),
            it: ItState::IDLE,
            npriv: false,
            primask: false,
            restart_pc: None,
        }
    }
}

impl CpuState {
    pub fn reg(&self, r: Reg) -> u32 {
        self.regs[r.index()]
    }

    pub fn pc(&self) -> u32 {
        self.regs[15]
    }

    pub fn status_word(&self) -> u32 {
        (self.flags.nzcv() as u32) << 28 | self.it.pack()
    }
}

enum Flow {
    Next,
    Branch(u32),
    ExcReturn,
    Halt,
    Interrupted,
}

enum Stop {
    Fault(CpuFault),
    Halt(HaltReason),
}

impl From<CpuFault> for Stop {
    fn from(f: CpuFault) -> Stop {
        Stop::Fault(f)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct MpuLatch {
    rnr: u32,
    rbar: u32,
}

#[derive(Debug, Clone)]
pub struct Machine {
    pub cpu: CpuState,
    pub mem: MemorySystem,
    pub mpu: MpuConfig,
    pub nvic: Nvic,
    pub trace: Trace,
    pub faults: Vec<FaultRecord>,
    retired: u64,
    schedule: Vec<Schedule>,
    cycle_limit: u64,
    halted: Option<HaltReason>,
    resume_breakpoint: Option<u32>,
    fault_status: u32,
    fault_address: u32,
    mpu_latch: MpuLatch,
}

impl Machine {
    pub fn new(config: &MachineConfig) -> Result<Machine, ConfigError> {
        if config.cycle_limit == 0 {
            return Err(ConfigError::CycleLimit);
        }
        let mut schedule = Vec::new();
        for (index, s) in config.stimuli.iter().enumerate() {
            let err = |msg: &str| ConfigError::Stimulus {
                index,
                msg: msg.to_string(),
            };
            if s.line >= config.lines.len() {
                return Err(err("line does not exist"));
            }
            let (by_instruction, next) = match (s.at_cycle, s.at_instruction) {
                (Some(c), None) => (false, c),
                (None, Some(i)) => (true, i),
                _ => return Err(err("give exactly one of at_cycle and at_instruction")),
            };
            if s.period == Some(0) {
                return Err(err("period must be positive"));
            }
            if s.repeat.is_some() && s.period.is_none() {
                return Err(err("repeat needs a period"));
            }
            schedule.push(Schedule {
                line: s.line,
                by_instruction,
                next,
                period: s.period,
                left: if s.period.is_some() {
                    s.repeat
                } else {
                    Some(1)
                },
            });
        }
        Ok(Machine {
            cpu: CpuState::default(),
            mem: MemorySystem::new(&config.memory)?,
            mpu: config.mpu,
            nvic: Nvic::new(&config.lines, config.costs, config.vector_table_base),
            trace: Trace::new(config.keep_trace),
            faults: Vec::new(),
            retired: 0,
            schedule,
            cycle_limit: config.cycle_limit,
            halted: None,
            resume_breakpoint: None,
            fault_status: 0,
            fault_address: 0,
            mpu_latch: MpuLatch::default(),
        })
    }

    /// Warm reset: processor, exception and halt state return to power-on
    /// values. Memory contents, the cycle and instruction counters, the
    /// trace and the stimulus schedule carry on.
    pub fn reset(&mut self, entry: u32, sp: u32) {
        self.nvic.clear_state();
        self.halted = None;
        self.resume_breakpoint = None;
        self.fault_status = 0;
        self.fault_address = 0;
        self.mpu_latch = MpuLatch::default();
        self.cpu = CpuState::default();
        self.cpu.regs[13] = sp;
        self.cpu.regs[15] = entry & !1;
    }

    pub fn cycles(&self) -> u64 {
        self.trace.now()
    }

    pub fn retired(&self) -> u64 {
        self.retired
    }

    pub fn halted(&self) -> Option<HaltReason> {
        self.halted
    }

    pub fn privileged(&self) -> bool {
        self.nvic.in_handler() || !self.cpu.npriv
    }

    /// Continues after a breakpoint halt; the instruction at the
    /// breakpoint executes once without re-triggering it.
    pub fn resume(&mut self) {
        if let Some(HaltReason::Breakpoint { address }) = self.halted {
            self.halted = None;
            self.resume_breakpoint = Some(address);
        }
    }

    pub fn pend(&mut self, line: usize) -> bool {
        let ok = self.nvic.pend(line).is_ok();
        if ok {
            self.trace
                .emit(TraceKind::Pend, self.cpu.pc(), 0, json!({ "line": line }));
        }
        ok
    }

    pub fn inject(&mut self, inj: &SoftErrorInjection) -> InjectOutcome {
        let outcome = self.mem.inject(inj);
        self.trace.emit(
            TraceKind::Inject,
            self.cpu.pc(),
            0,
            json!({ "injection": inj, "result": outcome }),
        );
        outcome
    }

    pub fn run(&mut self) -> HaltReason {
        loop {
            if let StepOutcome::Halted(h) = self.step() {
                return h;
            }
        }
    }

    /// Steps until halted or until `pred` holds at an instruction boundary.
    pub fn run_until(&mut self, mut pred: impl FnMut(&Machine) -> bool) -> Option<HaltReason> {
        loop {
            if let Some(h) = self.halted {
                return Some(h);
            }
            if pred(self) {
                return None;
            }
            self.step();
        }
    }

    fn halt(&mut self, reason: HaltReason) -> StepOutcome {
        self.trace.emit(
            TraceKind::Halt,
            self.cpu.pc(),
            0,
            serde_json::to_value(reason).unwrap_or(Value::Null),
        );
        self.halted = Some(reason);
        StepOutcome::Halted(reason)
    }

    fn apply_stimuli(&mut self, now: u64) {
        let retired = self.retired;
        let mut fired = Vec::new();
        for s in &mut self.schedule {
            loop {
                if s.left == Some(0) {
                    break;
                }
                let t = if s.by_instruction { retired } else { now };
                if t < s.next {
                    break;
                }
                fired.push((s.line, s.next));
                if let Some(l) = s.left.as_mut() {
                    *l -= 1;
                }
                match s.period {
                    Some(p) => s.next += p,
                    None => break,
                }
            }
        }
        for (line, due) in fired {
            let _ = self.nvic.pend(line);
            self.trace.emit(
                TraceKind::Pend,
                self.cpu.pc(),
                0,
                json!({ "line": line, "due": due }),
            );
        }
    }

    /// Emits records for the memory system's pending events and returns
    /// the cycles they account for.
    fn flush_mem_events(&mut self, pc: u32) -> u32 {
        let events: Vec<_> = self.mem.drain_events().collect();
        let mut total = 0;
        for e in events {
            let kind = match e.kind {
                MemEventKind::FetchNonseq => TraceKind::FetchNonseq,
                MemEventKind::Miss { .. } => TraceKind::Miss,
                MemEventKind::Fill { .. } => TraceKind::Fill,
                MemEventKind::Repair { .. } => TraceKind::Repair,
                MemEventKind::BitbandWrite { .. } => TraceKind::BitbandWrite,
            };
            let mut detail = serde_json::to_value(e.kind).unwrap_or(Value::Null);
            if let Value::Object(m) = &mut detail {
                m.remove("event");
                m.insert("address".into(), json!(e.addr));
            }
            self.trace.emit(kind, pc, e.cycles, detail);
            total += e.cycles;
        }
        total
    }

    /// Charges `total` cycles: memory sub-events first, the remainder to a
    /// record of `kind`.
    fn charge(&mut self, kind: TraceKind, pc: u32, total: u32, detail: Value) {
        let sub = self.flush_mem_events(pc);
        debug_assert!(sub <= total, "{kind:?}: sub-events {sub} exceed {total}");
        self.trace.emit(kind, pc, total.saturating_sub(sub), detail);
    }

    pub fn step(&mut self) -> StepOutcome {
        if let Some(h) = self.halted {
            return StepOutcome::Halted(h);
        }
        if self.cycles() >= self.cycle_limit {
            let limit = self.cycle_limit;
            return self.halt(HaltReason::CycleLimit { limit });
        }
        self.apply_stimuli(self.cycles());
        if let Some(line) = self.nvic.arbitrate(self.cpu.primask) {
            let e = Exception::Line(line);
            let pc = self.cpu.pc();
            return match self.enter_exception(e, pc) {
                Ok(()) => StepOutcome::Exception(e),
                Err(h) => self.halt(h),
            };
        }
        self.execute()
    }

    fn enter_exception(&mut self, e: Exception, return_pc: u32) -> Result<(), HaltReason> {
        let frame = StackedContext {
            r0: self.cpu.regs[0],
            r1: self.cpu.regs[1],
            r2: self.cpu.regs[2],
            r3: self.cpu.regs[3],
            r12: self.cpu.regs[12],
            lr: self.cpu.regs[14],
            return_address: return_pc,
            status: self.cpu.status_word(),
        };
        let sp = self.cpu.regs[13].wrapping_sub(4 * FRAME_WORDS);
        if !sp.is_multiple_of(4) {
            return Err(HaltReason::StackFault { address: sp });
        }
        for (i, w) in frame.to_words().into_iter().enumerate() {
            let a = sp.wrapping_add(4 * i as u32);
            self.mem
                .poke(a, MemSize::Word, w)
                .map_err(|_| HaltReason::StackFault { address: a })?;
        }
        let (vector, fetch) = self.read_vector(e)?;
        let cost = self.nvic.costs.entry(fetch);
        self.charge(
            TraceKind::IrqEntry,
            return_pc,
            cost,
            json!({ "exception": e, "vector": vector, "stacked_pc": return_pc }),
        );
        self.cpu.regs[13] = sp;
        self.cpu.regs[14] = EXC_RETURN;
        self.cpu.regs[15] = vector & !1;
        self.cpu.it = ItState::IDLE;
        self.nvic.activate(e);
        Ok(())
    }

    fn read_vector(&mut self, e: Exception) -> Result<(u32, u32), HaltReason> {
        let addr = self.nvic.vector_address(e);
        let (v, cycles) = self
            .mem
            .read(addr, MemSize::Word)
            .map_err(|_| HaltReason::VectorFault { address: addr })?;
        if v == 0 {
            return Err(HaltReason::VectorFault { address: addr });
        }
        Ok((v, cycles))
    }

    fn exception_return(&mut self, pc: u32) -> Result<(), HaltReason> {
        let finished = self
            .nvic
            .deactivate()
            .map_err(|_| HaltReason::ReturnWithoutHandler { pc })?;
        self.apply_stimuli(self.cycles());
        if let Some(line) = self.nvic.arbitrate(self.cpu.primask) {
            let e = Exception::Line(line);
            let (vector, fetch) = self.read_vector(e)?;
            let cost = self.nvic.costs.tail_chain(fetch);
            self.charge(
                TraceKind::TailChain,
                pc,
                cost,
                json!({ "from": finished, "to": e, "vector": vector }),
            );
            self.nvic.activate(e);
            self.cpu.regs[14] = EXC_RETURN;
            self.cpu.regs[15] = vector & !1;
            self.cpu.it = ItState::IDLE;
            return Ok(());
        }
        let sp = self.cpu.regs[13];
        let mut words = [0u32; FRAME_WORDS as usize];
        for (i, w) in words.iter_mut().enumerate() {
            let a = sp.wrapping_add(4 * i as u32);
            *w = self
                .mem
                .peek(a, MemSize::Word)
                .map_err(|_| HaltReason::StackFault { address: a })?;
        }
        let f = StackedContext::from_words(words);
        let cost = self.nvic.costs.exit();
        self.charge(
            TraceKind::IrqExit,
            pc,
            cost,
            json!({ "exception": finished, "return_to": f.return_address }),
        );
        self.cpu.regs[0] = f.r0;
        self.cpu.regs[1] = f.r1;
        self.cpu.regs[2] = f.r2;
        self.cpu.regs[3] = f.r3;
        self.cpu.regs[12] = f.r12;
        self.cpu.regs[14] = f.lr;
        self.cpu.regs[15] = f.return_address & !1;
        self.cpu.regs[13] = sp.wrapping_add(4 * FRAME_WORDS);
        self.cpu.flags = Flags::from_nzcv((f.status >> 28) as u8);
        self.cpu.it = ItState::unpack(f.status);
        Ok(())
    }

    fn take_fault(&mut self, pc: u32, acc: u32, fault: CpuFault) -> StepOutcome {
        let privileged = self.privileged();
        let kind = if fault.kind.is_mpu() {
            TraceKind::MpuFault
        } else {
            TraceKind::Abort
        };
        let cycle = self.cycles();
        self.charge(
            kind,
            pc,
            acc,
            json!({ "fault": fault, "privileged": privileged }),
        );
        self.fault_status = fault.kind.status_code();
        self.fault_address = fault.address;
        let nested = self.nvic.current_priority() <= FAULT_PRIORITY;
        let vector = self
            .mem
            .peek(self.nvic.vector_address(Exception::Fault), MemSize::Word)
            .unwrap_or(0);
        let handled = !nested && vector != 0;
        self.faults.push(FaultRecord {
            cycle,
            pc,
            fault,
            privileged,
            handled,
        });
        if nested {
            return self.halt(HaltReason::Lockup { pc, fault });
        }
        if !handled {
            return self.halt(HaltReason::UnhandledFault { pc, fault });
        }
        match self.enter_exception(Exception::Fault, pc) {
            Ok(()) => StepOutcome::Faulted,
            Err(h) => self.halt(h),
        }
    }

    fn read_reg(&self, r: Reg, pc: u32) -> u32 {
        if r == Reg::PC {
            pc.wrapping_add(4)
        } else {
            self.cpu.reg(r)
        }
    }

    fn write_reg(&mut self, r: Reg, value: u32) -> Flow {
        if r == Reg::PC {
            if self.nvic.in_handler() && is_exc_return(value) {
                Flow::ExcReturn
            } else {
                Flow::Branch(value & !1)
            }
        } else {
            self.cpu.regs[r.index()] = value;
            Flow::Next
        }
    }

    fn load(&mut self, addr: u32, size: MemSize, acc: &mut u32) -> Result<u32, CpuFault> {
        let privileged = self.privileged();
        if is_scs(addr) {
            *acc += 1;
            return self.scs_read(addr, size, privileged);
        }
        if let Decision::Fault(r) = self.mpu.check_access(addr, AccessKind::Read, privileged) {
            return Err(CpuFault::mpu(addr, AccessKind::Read, r));
        }
        let (v, c) = self
            .mem
            .read(addr, size)
            .map_err(|f| CpuFault::mem(f, AccessKind::Read))?;
        *acc += c;
        Ok(v)
    }

    fn store(
        &mut self,
        addr: u32,
        size: MemSize,
        value: u32,
        acc: &mut u32,
    ) -> Result<(), CpuFault> {
        let privileged = self.privileged();
        if is_scs(addr) {
            *acc += 1;
            return self.scs_write(addr, size, value, privileged);
        }
        if let Decision::Fault(r) = self.mpu.check_access(addr, AccessKind::Write, privileged) {
            return Err(CpuFault::mpu(addr, AccessKind::Write, r));
        }
        let c = self
            .mem
            .write(addr, size, value)
            .map_err(|f| CpuFault::mem(f, AccessKind::Write))?;
        *acc += c;
        Ok(())
    }

    fn execute(&mut self) -> StepOutcome {
        let pc = self.cpu.pc();
        let ignore_bp = self.resume_breakpoint.take() == Some(pc);
        let fetched = match self.mem.fetch(pc, ignore_bp) {
            Ok(f) => f,
            Err(FetchFault::Breakpoint(address)) => {
                self.flush_mem_events(pc);
                self.trace
                    .emit(TraceKind::Breakpoint, pc, 0, json!({ "address": address }));
                return self.halt(HaltReason::Breakpoint { address });
            }
            Err(FetchFault::Bus(fault)) => {
                self.flush_mem_events(pc);
                return self.halt(HaltReason::FetchFault {
                    address: fault.address(),
                    fault,
                });
            }
        };
        let mut acc = 1 + fetched.cycles;
        let privileged = self.privileged();
        if let Decision::Fault(r) = self.mpu.check_access(pc, AccessKind::Execute, privileged) {
            return self.take_fault(pc, acc, CpuFault::mpu(pc, AccessKind::Execute, r));
        }
        let inst = match decode(fetched.h1, fetched.h2) {
            Ok(i) => i,
            Err(_) => {
                let f = CpuFault {
                    kind: FaultKind::Undefined,
                    address: pc,
                    access: Some(AccessKind::Execute),
                };
                return self.take_fault(pc, acc, f);
            }
        };
        let width = fetched.len();
        let in_block = self.cpu.it.active() && !matches!(inst.op, Op::It { .. });
        if in_block {
            let cond = self.cpu.it.current_cond().unwrap_or(crate::isa::Cond::Al);
            if !eval_cond(cond, self.cpu.flags) {
                self.cpu.it.advance();
                self.cpu.regs[15] = pc.wrapping_add(width);
                self.retired += 1;
                self.charge(
                    TraceKind::Retire,
                    pc,
                    acc,
                    json!({ "op": inst.op.mnemonic(), "skipped": true }),
                );
                return StepOutcome::Retired;
            }
        }
        let flow = match self.exec_op(pc, width, &inst.op, &mut acc) {
            Ok(f) => f,
            Err(Stop::Fault(f)) => return self.take_fault(pc, acc, f),
            Err(Stop::Halt(h)) => {
                self.charge(
                    TraceKind::Abort,
                    pc,
                    acc,
                    json!({ "op": inst.op.mnemonic() }),
                );
                return self.halt(h);
            }
        };
        if let Flow::Interrupted = flow {
            self.cpu.restart_pc = Some(pc);
            self.charge(
                TraceKind::LdmInterrupted,
                pc,
                acc,
                json!({ "op": inst.op.mnemonic() }),
            );
            return StepOutcome::Interrupted;
        }
        if in_block {
            self.cpu.it.advance();
        }
        if matches!(inst.op, Op::Ldm { .. } | Op::Stm { .. }) && self.cpu.restart_pc == Some(pc) {
            self.cpu.restart_pc = None;
        }
        let mut detail = json!({ "op": inst.op.mnemonic() });
        match flow {
            Flow::Next | Flow::Halt => self.cpu.regs[15] = pc.wrapping_add(width),
            Flow::Branch(target) => {
                acc += 2;
                self.cpu.regs[15] = target;
                detail["taken"] = json!(target);
            }
            Flow::ExcReturn | Flow::Interrupted => {}
        }
        self.retired += 1;
        self.charge(TraceKind::Retire, pc, acc, detail);
        match flow {
            Flow::Halt => self.halt(HaltReason::Halt),
            Flow::ExcReturn => match self.exception_return(pc) {
                Ok(()) => StepOutcome::Retired,
                Err(h) => self.halt(h),
            },
            _ => StepOutcome::Retired,
        }
    }

    fn operand(&self, src: Operand, pc: u32) -> u32 {
        match src {
            Operand::Reg(r) => self.read_reg(r, pc),
            Operand::Imm(i) => i,
        }
    }

    fn exec_op(&mut self, pc: u32, width: u32, op: &Op, acc: &mut u32) -> Result<Flow, Stop> {
        let flow = match *op {
            Op::Mov { rd, src } => {
                let v = self.operand(src, pc);
                self.write_reg(rd, v)
            }
            Op::Movw { rd, imm16 } => {
                let v = exec_mov_halves(HalfMove::Low, self.cpu.reg(rd), imm16);
                self.write_reg(rd, v)
            }
            Op::Movh { rd, imm16 } => {
                let v = exec_mov_halves(HalfMove::High, self.cpu.reg(rd), imm16);
                self.write_reg(rd, v)
            }
            Op::Alu { op, rd, rn, src } => {
                let v = op.apply(self.read_reg(rn, pc), self.operand(src, pc));
                self.write_reg(rd, v)
            }
            Op::Cmp { rn, src } => {
                self.cpu.flags = Flags::from_compare(self.read_reg(rn, pc), self.operand(src, pc));
                Flow::Next
            }
            Op::Div { signed, rd, rn, rm } => {
                let out = exec_divide(signed, self.read_reg(rn, pc), self.read_reg(rm, pc));
                if out.divide_by_zero {
                    self.trace.emit(
                        TraceKind::DivByZero,
                        pc,
                        0,
                        json!({ "signed": signed, "dividend": self.read_reg(rn, pc) }),
                    );
                }
                self.write_reg(rd, out.quotient)
            }
            Op::Bfi { rd, rn, lsb, width } => {
                let v = exec_bitfield(
                    BitfieldKind::Insert,
                    self.cpu.reg(rd),
                    self.read_reg(rn, pc),
                    lsb as u32,
                    width as u32,
                );
                self.write_reg(rd, v)
            }
            Op::Bfc { rd, lsb, width } => {
                let v = exec_bitfield(
                    BitfieldKind::Clear,
                    self.cpu.reg(rd),
                    0,
                    lsb as u32,
                    width as u32,
                );
                self.write_reg(rd, v)
            }
            Op::Ubfx { rd, rn, lsb, width } => {
                let v = exec_bitfield(
                    BitfieldKind::ExtractUnsigned,
                    0,
                    self.read_reg(rn, pc),
                    lsb as u32,
                    width as u32,
                );
                self.write_reg(rd, v)
            }
            Op::Rbit { rd, rn } => {
                let v = exec_rbit(self.read_reg(rn, pc));
                self.write_reg(rd, v)
            }
            Op::B { cond, offset } => {
                if eval_cond(cond, self.cpu.flags) {
                    Flow::Branch(pc.wrapping_add(offset as u32))
                } else {
                    Flow::Next
                }
            }
            Op::Bl { offset } => {
                self.cpu.regs[14] = pc.wrapping_add(width);
                Flow::Branch(pc.wrapping_add(offset as u32))
            }
            Op::It { cond, ref pattern } => {
                self.cpu.it = it_begin(cond, pattern);
                Flow::Next
            }
            Op::Tb { rn, count } => {
                let index = self.read_reg(rn, pc);
                if index >= count as u32 {
                    return Err(Stop::Halt(HaltReason::TableIndex { pc, index, count }));
                }
                let table = (pc.wrapping_add(width).wrapping_add(3)) & !3;
                let target = self.load(table.wrapping_add(4 * index), MemSize::Word, acc)?;
                Flow::Branch(target & !1)
            }
            Op::Load {
                size,
                rt,
                rn,
                offset,
            } => {
                let addr = self.effective_address(pc, rn, offset);
                let v = self.load(addr, size, acc)?;
                self.write_reg(rt, v)
            }
            Op::Store {
                size,
                rt,
                rn,
                offset,
            } => {
                let addr = self.effective_address(pc, rn, offset);
                let v = self.read_reg(rt, pc);
                self.store(addr, size, v, acc)?;
                Flow::Next
            }
            Op::Ldm {
                rn,
                list,
                writeback,
            } => self.exec_multiple(pc, rn, list, writeback, false, acc)?,
            Op::Stm {
                rn,
                list,
                writeback,
            } => self.exec_multiple(pc, rn, list, writeback, true, acc)?,
            Op::Nop => Flow::Next,
            Op::Halt => Flow::Halt,
        };
        Ok(flow)
    }

    /// Address computed by a load or store at `pc`. PC-relative accesses
    /// use the word-aligned instruction address as base.
    pub fn effective_address(&self, pc: u32, rn: Reg, offset: Offset) -> u32 {
        let base = if rn == Reg::PC {
            pc & !3
        } else {
            self.cpu.reg(rn)
        };
        let off = match offset {
            Offset::Imm(i) => i as u32,
            Offset::Reg(r) => self.read_reg(r, pc),
        };
        base.wrapping_add(off)
    }

    fn data_fills(&self) -> usize {
        self.mem
            .events()
            .iter()
            .filter(|e| {
                matches!(
                    e.kind,
                    MemEventKind::Fill {
                        side: CacheSide::Data
                    }
                )
            })
            .count()
    }

    /// Interrupt sample point inside a multi-word transfer.
    fn irq_due(&mut self, acc: u32) -> bool {
        let now = self.cycles() + acc as u64;
        self.apply_stimuli(now);
        self.nvic.arbitrate(self.cpu.primask).is_some()
    }

    fn exec_multiple(
        &mut self,
        pc: u32,
        rn: Reg,
        list: RegList,
        writeback: bool,
        store: bool,
        acc: &mut u32,
    ) -> Result<Flow, Stop> {
        let base = self.cpu.reg(rn);
        let access = if store {
            AccessKind::Write
        } else {
            AccessKind::Read
        };
        if !base.is_multiple_of(4) {
            return Err(CpuFault::mem(MemFault::Unaligned(base), access).into());
        }
        let n = list.len();
        let device = (0..n).any(|k| self.mem.is_device(base.wrapping_add(4 * k)));
        let mut loaded = Vec::with_capacity(n as usize);
        for (k, r) in list.iter().enumerate() {
            let addr = base.wrapping_add(4 * k as u32);
            let fills_before = self.data_fills();
            if !device && self.mem.data_access_will_fill(addr) && self.irq_due(*acc) {
                return Ok(Flow::Interrupted);
            }
            if store {
                let v = self.read_reg(r, pc);
                self.store(addr, MemSize::Word, v, acc)?;
            } else {
                loaded.push((r, self.load(addr, MemSize::Word, acc)?));
            }
            let filled = self.data_fills() > fills_before;
            if !device && filled && k + 1 < n as usize && self.irq_due(*acc) {
                return Ok(Flow::Interrupted);
            }
        }
        let mut flow = Flow::Next;
        for (r, v) in loaded {
            if r == Reg::PC {
                flow = self.write_reg(r, v);
            } else {
                self.cpu.regs[r.index()] = v;
            }
        }
        if writeback && !(!store && list.contains(rn)) {
            self.cpu.regs[rn.index()] = base.wrapping_add(4 * n);
        }
        Ok(flow)
    }
}
