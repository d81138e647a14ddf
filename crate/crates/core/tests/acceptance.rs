//! One PASS/FAIL line per acceptance criterion, with wall-clock time
//! against each criterion's budget. Exits non-zero if any line fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use thumbsim::asm::{assemble, LoadMode};
use thumbsim::harness::scenarios::{self, literal_pool, run_scenario, ScenarioReport};
use thumbsim::harness::{
    self, default_memory, Addr, FpbSetting, InjectionResult, ProgramConfig, RunConfig,
};
use thumbsim::isa::encoding::encode_best;
use thumbsim::isa::{Flags, MemSize, Op, Operand, Reg};
use thumbsim::machine::{CpuState, HaltReason, Machine, MachineConfig, Stimulus};
use thumbsim::memory::cache::CacheConfig;
use thumbsim::memory::fpb::{FpbError, FpbMode};
use thumbsim::memory::{MemoryConfig, RegionDescriptor, RegionKind};
use thumbsim::mpu::{MpuRegion, Perms, MIN_REGION_SIZE};
use thumbsim::nvic::{LineConfig, NvicCosts};
use thumbsim::trace::TraceKind;

const RAM: u32 = 0x2000_0000;
const STACK: u32 = RAM + 0x8000;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn failing(r: &ScenarioReport) -> String {
    r.assertions
        .iter()
        .filter(|a| !a.pass)
        .map(|a| format!("{}: {}", a.name, a.detail))
        .collect::<Vec<_>>()
        .join("; ")
}

fn scenario_passes(name: &str) -> Result<ScenarioReport, String> {
    let out = run_scenario(name, &[]).map_err(|e| e.to_string())?;
    ensure(
        out.report.pass,
        format!("{name} failed: {}", failing(&out.report)),
    )?;
    Ok(out.report)
}

// ---------------------------------------------------------------------------
// 1. Instruction oracles
// ---------------------------------------------------------------------------

fn bit(x: u32, i: u32) -> u32 {
    (x >> i) & 1
}

fn bfi_oracle(rd: u32, rn: u32, lsb: u32, width: u32) -> u32 {
    let mut out = 0;
    for i in 0..32 {
        let b = if i >= lsb && i < lsb + width {
            bit(rn, i - lsb)
        } else {
            bit(rd, i)
        };
        out |= b << i;
    }
    out
}

fn bfc_oracle(rd: u32, lsb: u32, width: u32) -> u32 {
    let mut out = 0;
    for i in 0..32 {
        if i < lsb || i >= lsb + width {
            out |= bit(rd, i) << i;
        }
    }
    out
}

fn ubfx_oracle(rn: u32, lsb: u32, width: u32) -> u32 {
    let mut out = 0;
    for i in 0..width {
        out |= bit(rn, lsb + i) << i;
    }
    out
}

fn rbit_oracle(rn: u32) -> u32 {
    let mut out = 0;
    for i in 0..32 {
        out |= bit(rn, i) << (31 - i);
    }
    out
}

/// Restoring shift-subtract division.
fn udiv_oracle(n: u32, d: u32) -> u32 {
    if d == 0 {
        return 0;
    }
    let (mut q, mut r) = (0u32, 0u64);
    for i in (0..32).rev() {
        r = (r << 1) | bit(n, i) as u64;
        if r >= d as u64 {
            r -= d as u64;
            q |= 1 << i;
        }
    }
    q
}

fn sdiv_oracle(n: u32, d: u32) -> u32 {
    if d == 0 {
        return 0;
    }
    let (a, b) = (n as i32 as i64, d as i32 as i64);
    let mag = udiv_oracle(a.unsigned_abs() as u32, b.unsigned_abs() as u32) as i64;
    let q = if (a < 0) != (b < 0) { -mag } else { mag };
    q as u32
}

fn movw_oracle(imm: u16) -> u32 {
    u32::from_le_bytes([imm as u8, (imm >> 8) as u8, 0, 0])
}

fn movh_oracle(rd: u32, imm: u16) -> u32 {
    let b = rd.to_le_bytes();
    u32::from_le_bytes([b[0], b[1], imm as u8, (imm >> 8) as u8])
}

fn ram_machine() -> Machine {
    let mut cfg = MachineConfig::new(default_memory());
    cfg.keep_trace = false;
    Machine::new(&cfg).unwrap()
}

/// Executes `op` alone from RAM with r1, r2 and r3 preset and flags set.
fn exec_one(m: &mut Machine, op: &Op, inputs: [u32; 3], flags: Flags) -> CpuState {
    let mut bytes = encode_best(op).unwrap().to_bytes();
    bytes.extend(encode_best(&Op::Halt).unwrap().to_bytes());
    m.mem.load_bytes(RAM, &bytes).unwrap();
    m.reset(RAM, STACK);
    m.cpu.regs[1..4].copy_from_slice(&inputs);
    m.cpu.flags = flags;
    m.step();
    m.cpu
}

fn r(i: u8) -> Reg {
    Reg::r(i)
}

fn field(rng: &mut ChaCha8Rng) -> (u8, u8) {
    let width = rng.gen_range(1..=32u8);
    (rng.gen_range(0..=32 - width), width)
}

fn criterion_instructions() -> Outcome {
    const SAMPLES: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1EE7);
    let mut m = ram_machine();
    let mut checked = 0usize;

    let mut check = |m: &mut Machine, op: Op, inputs: [u32; 3], want: u32| -> Result<(), String> {
        let flags = Flags::from_nzcv(checked as u8 & 15);
        let cpu = exec_one(m, &op, inputs, flags);
        checked += 1;
        ensure(
            cpu.regs[1] == want,
            format!(
                "{op:?} on {inputs:x?}: got {:#x}, want {want:#x}",
                cpu.regs[1]
            ),
        )?;
        ensure(cpu.flags == flags, format!("{op:?} changed the flags"))
    };

    // Listed edge cases.
    let bfi = |lsb, width| Op::Bfi {
        rd: r(1),
        rn: r(2),
        lsb,
        width,
    };
    let bfc = |lsb, width| Op::Bfc {
        rd: r(1),
        lsb,
        width,
    };
    let ubfx = |lsb, width| Op::Ubfx {
        rd: r(1),
        rn: r(2),
        lsb,
        width,
    };
    let rbit = Op::Rbit { rd: r(1), rn: r(2) };
    let div = |signed| Op::Div {
        signed,
        rd: r(1),
        rn: r(2),
        rm: r(3),
    };
    let movw = |imm16| Op::Movw { rd: r(1), imm16 };
    let movh = |imm16| Op::Movh { rd: r(1), imm16 };
    check(&mut m, bfi(8, 8), [0xFFFF_FFFF, 0, 0], 0xFFFF_00FF)?;
    check(&mut m, bfi(0, 32), [0x1234, 0xCAFE_F00D, 0], 0xCAFE_F00D)?;
    check(&mut m, bfi(31, 1), [0, 1, 0], 0x8000_0000)?;
    check(&mut m, bfc(0, 32), [0xFFFF_FFFF, 0, 0], 0)?;
    check(&mut m, bfc(31, 1), [0xFFFF_FFFF, 0, 0], 0x7FFF_FFFF)?;
    check(&mut m, ubfx(12, 8), [0, 0x1234_5678, 0], 0x45)?;
    check(&mut m, ubfx(0, 32), [0, 0x8765_4321, 0], 0x8765_4321)?;
    check(&mut m, rbit.clone(), [0, 0, 0], 0)?;
    check(&mut m, rbit.clone(), [0, 1, 0], 0x8000_0000)?;
    check(
        &mut m,
        rbit.clone(),
        [0, 0x1234_5678, 0],
        rbit_oracle(0x1234_5678),
    )?;
    check(&mut m, div(false), [0, 100, 7], 14)?;
    check(&mut m, div(true), [0, (-7i32) as u32, 2], (-3i32) as u32)?;
    check(
        &mut m,
        div(true),
        [0, i32::MIN as u32, u32::MAX],
        i32::MIN as u32,
    )?;
    check(&mut m, div(false), [0, u32::MAX, 1], u32::MAX)?;
    check(&mut m, movw(0x1234), [0xDEAD_BEEF, 0, 0], 0x1234)?;
    check(&mut m, movh(0x5678), [0x1234, 0, 0], 0x5678_1234)?;
    for signed in [false, true] {
        let before = m.trace.count(TraceKind::DivByZero);
        check(&mut m, div(signed), [7, 12345, 0], 0)?;
        ensure(
            m.trace.count(TraceKind::DivByZero) == before + 1,
            "divide by zero left no trace event",
        )?;
    }

    for _ in 0..SAMPLES {
        let (a, b, c): (u32, u32, u32) = (rng.gen(), rng.gen(), rng.gen());
        let (lsb, width) = field(&mut rng);
        let (l, w) = (lsb as u32, width as u32);
        check(&mut m, bfi(lsb, width), [a, b, 0], bfi_oracle(a, b, l, w))?;
        check(&mut m, bfc(lsb, width), [a, 0, 0], bfc_oracle(a, l, w))?;
        check(&mut m, ubfx(lsb, width), [0, b, 0], ubfx_oracle(b, l, w))?;
        check(&mut m, rbit.clone(), [0, b, 0], rbit_oracle(b))?;
        // Small divisors are where truncation matters most.
        let d = if rng.gen_bool(0.5) { c } else { c % 17 };
        check(&mut m, div(false), [0, b, d], udiv_oracle(b, d))?;
        check(&mut m, div(true), [0, b, d], sdiv_oracle(b, d))?;
        let imm = c as u16;
        check(&mut m, movw(imm), [a, 0, 0], movw_oracle(imm))?;
        check(&mut m, movh(imm), [a, 0, 0], movh_oracle(a, imm))?;
    }
    Ok(format!(
        "{checked} executions of BFI/BFC/UBFX/RBIT/UDIV/SDIV/MOVW/MOVH matched bit-loop oracles, flags untouched"
    ))
}

// ---------------------------------------------------------------------------
// 2. IT-block equivalence
// ---------------------------------------------------------------------------

const CONDS: [&str; 14] = [
    "eq", "ne", "cs", "cc", "mi", "pl", "vs", "vc", "hi", "ls", "ge", "lt", "gt", "le",
];

fn inverse(c: &str) -> &'static str {
    let i = CONDS.iter().position(|x| *x == c).unwrap();
    CONDS[i ^ 1]
}

fn random_data_op(rng: &mut ChaCha8Rng) -> String {
    let rd = rng.gen_range(0..8);
    let rn = rng.gen_range(0..8);
    let rm = rng.gen_range(0..8);
    match rng.gen_range(0..10) {
        0 => format!("mov r{rd}, #{}", rng.gen_range(0..256)),
        1 => format!("mov r{rd}, r{rm}"),
        2 => format!("add r{rd}, r{rn}, r{rm}"),
        3 => format!("sub r{rd}, r{rn}, r{rm}"),
        4 => format!("and r{rd}, r{rn}, r{rm}"),
        5 => format!("orr r{rd}, r{rn}, r{rm}"),
        6 => format!("eor r{rd}, r{rn}, r{rm}"),
        7 => format!("lsl r{rd}, r{rn}, #{}", rng.gen_range(0..32)),
        8 => format!("lsr r{rd}, r{rn}, #{}", rng.gen_range(1..32)),
        _ => format!("add r{rd}, #{}", rng.gen_range(0..256)),
    }
}

fn run_from(
    m: &mut Machine,
    entry: u32,
    regs: &[u32; 8],
    flags: Flags,
) -> Result<CpuState, String> {
    m.reset(entry, STACK);
    m.cpu.regs[..8].copy_from_slice(regs);
    m.cpu.flags = flags;
    match m.run() {
        HaltReason::Halt => Ok(m.cpu),
        other => Err(format!("block halted with {other:?}")),
    }
}

fn criterion_it_blocks() -> Outcome {
    const BLOCKS: usize = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(0x17B1);
    let mut m = ram_machine();
    let (pred_at, branch_at) = (RAM, RAM + 0x1000);
    let mut runs = 0;
    for block in 0..BLOCKS {
        let len = rng.gen_range(1..=4);
        let cond = CONDS[rng.gen_range(0..CONDS.len())];
        let slots: Vec<bool> = (0..len).map(|i| i == 0 || rng.gen_bool(0.5)).collect();
        let ops: Vec<String> = (0..len).map(|_| random_data_op(&mut rng)).collect();

        let suffix: String = slots[1..]
            .iter()
            .map(|&t| if t { 't' } else { 'e' })
            .collect();
        let mut pred = format!(".org {pred_at:#x}\n    it{suffix} {cond}\n");
        let mut branch = format!(".org {branch_at:#x}\n");
        for (k, (op, then)) in ops.iter().zip(&slots).enumerate() {
            pred += &format!("    {op}\n");
            // Skip the slot when its own condition fails.
            let skip_if = if *then { inverse(cond) } else { cond };
            branch += &format!("    b{skip_if} skip{k}\n    {op}\nskip{k}:\n");
        }
        pred += "    halt\n";
        branch += "    halt\n";
        for src in [&pred, &branch] {
            let img = assemble(src, LoadMode::Pool).map_err(|e| format!("{e}\n{src}"))?;
            img.load_into(&mut m.mem).map_err(|e| e.to_string())?;
        }

        let regs: [u32; 8] = rng.gen();
        for nzcv in 0..16u8 {
            let flags = Flags::from_nzcv(nzcv);
            let a = run_from(&mut m, pred_at, &regs, flags)?;
            let b = run_from(&mut m, branch_at, &regs, flags)?;
            runs += 2;
            ensure(
                a.regs[..15] == b.regs[..15] && a.flags == b.flags,
                format!(
                    "block {block} flags {nzcv:04b} differs\n{pred}{branch}\n{:x?}\n{:x?}",
                    &a.regs[..8],
                    &b.regs[..8]
                ),
            )?;
        }
    }
    Ok(format!(
        "{BLOCKS} random blocks x 16 flag states: predicated and branch forms agree ({runs} runs)"
    ))
}

// ---------------------------------------------------------------------------
// 3. Bit-band
// ---------------------------------------------------------------------------

fn criterion_bitband() -> Outcome {
    const TRIPLES: usize = 10_000;
    const TARGET: u32 = 0x2010_0000;
    const ALIAS: u32 = 0x2200_0000;
    let mut mem = default_memory();
    mem.regions.push(RegionDescriptor::new(
        "t",
        RegionKind::BitbandTarget,
        TARGET,
        0x100,
    ));
    mem.regions.push(RegionDescriptor::new(
        "a",
        RegionKind::BitbandAlias,
        ALIAS,
        0x800,
    ));
    let mut cfg = MachineConfig::new(mem);
    cfg.keep_trace = false;
    let mut m = Machine::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xB17B);

    let mut shadow: Vec<u8> = (0..0x100).map(|_| rng.gen()).collect();
    m.mem.load_bytes(TARGET, &shadow).unwrap();
    for _ in 0..TRIPLES {
        let byte = rng.gen_range(0..0x100u32);
        let bitn = rng.gen_range(0..8u32);
        let value: u32 = rng.gen();
        let alias = ALIAS + byte * 8 + bitn;
        let size = match rng.gen_range(0..3) {
            2 if alias.is_multiple_of(4) => MemSize::Word,
            1 if alias.is_multiple_of(2) => MemSize::Half,
            _ => MemSize::Byte,
        };
        let op = Op::Store {
            size,
            rt: r(1),
            rn: r(2),
            offset: thumbsim::isa::Offset::Imm(0),
        };
        exec_one(&mut m, &op, [value, alias, 0], Flags::default());
        // Mask-and-merge on the shadow copy.
        let mask = 1u8 << bitn;
        let b = &mut shadow[byte as usize];
        *b = (*b & !mask) | (if value & 1 == 1 { mask } else { 0 });
        let actual = m.mem.region_bytes("t").unwrap();
        ensure(
            actual == shadow.as_slice(),
            format!("alias write {alias:#x} <- {value:#x} ({size:?}) diverged at byte {byte:#x}"),
        )?;
    }

    let report = scenario_passes("bitband_semaphore")?;
    let alias_events = report.metrics["alias"]["events"].as_u64().unwrap_or(0);
    let rmw_events = report.metrics["read_modify_write"]["events"]
        .as_u64()
        .unwrap_or(0);
    let lost = report.metrics["lost_update_boundaries"]
        .as_array()
        .map_or(0, Vec::len);
    ensure(
        alias_events <= 20 && rmw_events <= 20,
        "main loop longer than 20 events",
    )?;
    ensure(lost >= 1, "read-modify-write never lost an update")?;
    Ok(format!(
        "{TRIPLES} alias writes match mask-and-merge; alias safe at all {alias_events} boundaries; \
         read-modify-write loses an update at {lost} of {rmw_events}"
    ))
}

// ---------------------------------------------------------------------------
// 4. Literal pool penalty
// ---------------------------------------------------------------------------

fn criterion_literal_pool() -> Outcome {
    let report = scenario_passes("literal_pool")?;
    let p = literal_pool::Params::default();
    let m = &report.metrics;
    // Default timing: one sequential beat is 1 cycle, a stream break 4.
    // A pool load adds the data read (4) and the restarted fetch (4 - 1)
    // and saves one instruction (1 + 1), against a two-instruction pair.
    let per_load = 4 + (4 - 1) - (1 + 1);
    let loads = p.blocks as i64 * p.iterations as i64;
    let margin = m["margin_cycles"].as_i64().unwrap_or(-1);
    ensure(
        margin == per_load * loads,
        format!("margin {margin}, oracle {per_load} x {loads}"),
    )?;
    ensure(
        m["pool_loads_executed"].as_i64() == Some(loads),
        "executed pool load count differs from blocks x iterations",
    )?;
    let pct = m["degradation_percent"].as_f64().unwrap_or(0.0);
    ensure(
        pct >= 15.0,
        format!("default timing degrades only {pct:.2}%"),
    )?;
    let found = &m["reaching_target"];
    ensure(!found.is_null(), "sweep found no timing reaching 15%")?;
    Ok(format!(
        "margin {margin} = {per_load} x {loads} loads; default degradation {pct:.1}%; \
         least stream-break cost reaching 15%: {} cycles",
        found["flash"]["nonsequential_cycles"]
    ))
}

// ---------------------------------------------------------------------------
// 5. Tail-chaining
// ---------------------------------------------------------------------------

fn criterion_tail_chain() -> Outcome {
    let report = scenario_passes("tail_chain")?;
    let c = &report.runs["chained"].events;
    let s = &report.runs["separated"].events;
    ensure(
        (c.stackings, c.unstacks, c.tail_chains) == (1, 1, 1),
        format!(
            "chained: {} stackings, {} unstacks",
            c.stackings, c.unstacks
        ),
    )?;
    ensure(
        (s.stackings, s.unstacks) == (2, 2),
        "separated run did not stack twice",
    )?;
    let costs = NvicCosts::default();
    ensure(
        (
            costs.stacking_cycles,
            costs.unstack_cycles,
            costs.tailchain_cycles,
        ) == (8, 8, 4),
        "default costs moved",
    )?;
    let saving = report.metrics["saving_cycles"].as_i64().unwrap_or(0);
    ensure(saving == 8 + 8 - 4, format!("saving {saving}"))?;
    Ok(format!(
        "1 stacking + 1 unstack for 2 interrupts; saves {saving} cycles (8 + 8 - 4)"
    ))
}

// ---------------------------------------------------------------------------
// 6. Interruptible LDM
// ---------------------------------------------------------------------------

const LDM_PROGRAM: &str = "\
.org 0x20000000
vectors: .word isr, fault
start:
    ldr r10, =0x3000001C
    ldm r10, {r0-r9}
    halt
isr:
    ldr r0, =0x20008000
    ldr r1, [r0]
    add r1, #1
    str r1, [r0]
    bx lr
fault:
    halt
";

const SRAM: u32 = 0x3000_0000;

fn ldm_machine(at_cycle: Option<u64>) -> Machine {
    let mut mem = MemoryConfig::new(vec![
        RegionDescriptor::new("flash", RegionKind::Flash, 0, 0x1_0000),
        RegionDescriptor::new("ram", RegionKind::Ram, RAM, 0x1_0000),
        RegionDescriptor::new("sram", RegionKind::Ram, SRAM, 0x1000).cached(),
    ]);
    mem.dcache = Some(CacheConfig::default());
    let mut cfg = MachineConfig::new(mem);
    cfg.lines = vec![LineConfig::default()];
    cfg.vector_table_base = RAM;
    cfg.stimuli = at_cycle
        .into_iter()
        .map(|t| Stimulus::at_cycle(0, t))
        .collect();
    let mut m = Machine::new(&cfg).unwrap();
    let img = assemble(LDM_PROGRAM, LoadMode::Pool).unwrap();
    img.load_into(&mut m.mem).unwrap();
    for k in 0..16 {
        m.mem
            .poke(SRAM + 0x1C + 4 * k, MemSize::Word, 0x1000 + k)
            .unwrap();
    }
    m.reset(img.symbol("start").unwrap(), RAM + 0x1_0000);
    m
}

fn first(m: &Machine, kind: TraceKind) -> Option<(u64, u64)> {
    m.trace
        .records()
        .iter()
        .find(|r| r.event == kind)
        .map(|r| (r.cycle, r.cycles as u64))
}

fn criterion_ldm() -> Outcome {
    let mut golden = ldm_machine(None);
    ensure(golden.run() == HaltReason::Halt, "golden run did not halt")?;
    let fills = golden.trace.count(TraceKind::Fill);
    ensure(
        fills == 3,
        format!("10 words from line offset 7 filled {fills} lines"),
    )?;
    let (first_fill, _) = first(&golden, TraceKind::Fill).ok_or("no fill")?;

    let fill = CacheConfig::default().fill_cycles_per_line as u64;
    // Vector table sits in single-cycle RAM.
    let entry = NvicCosts::default().entry(1) as u64;
    let due = first_fill + 1;
    let mut m = ldm_machine(Some(due));
    ensure(m.run() == HaltReason::Halt, "interrupted run did not halt")?;
    ensure(
        m.trace.count(TraceKind::LdmInterrupted) == 1,
        "LDM was not interrupted",
    )?;
    let (at, cost) = first(&m, TraceKind::IrqEntry).ok_or("no exception entry")?;
    let latency = at + cost - due;
    let bound = fill + entry;
    let baseline = 3 * fill + entry;
    ensure(latency <= bound, format!("latency {latency} > {bound}"))?;
    ensure(
        latency < baseline,
        format!("latency {latency} not below {baseline}"),
    )?;
    ensure(
        m.cpu.regs[..10] == golden.cpu.regs[..10] && m.cpu.regs[10] == golden.cpu.regs[10],
        "restarted LDM state differs from the uninterrupted run",
    )?;
    ensure(
        m.mem.peek(0x2000_8000, MemSize::Word) == Ok(1),
        "handler did not run exactly once",
    )?;
    Ok(format!(
        "interrupt served after {latency} cycles (bound {bound}, non-interruptible {baseline}); \
         restarted LDM equals uninterrupted run"
    ))
}

// ---------------------------------------------------------------------------
// 7. Soft errors
// ---------------------------------------------------------------------------

fn criterion_soft_error() -> Outcome {
    let report = scenario_passes("soft_error")?;
    let campaigns = &report.metrics["campaigns"];
    let runs = |name: &str| -> Vec<InjectionResult> {
        campaigns[name]["runs"]
            .as_array()
            .map(|v| {
                v.iter()
                    .filter_map(|r| serde_json::from_value(r.clone()).ok())
                    .collect()
            })
            .unwrap_or_default()
    };
    let mut corrected = 0;
    for name in ["icache", "tcm"] {
        for r in runs(name) {
            match r {
                InjectionResult::Corrected { extra_cycles } if extra_cycles > 0 => corrected += 1,
                other => return Err(format!("{name}: {other:?}")),
            }
        }
    }
    ensure(corrected == 200, format!("{corrected}/200 corrected"))?;

    let table = scenarios::soft_error::SRAM_TABLE;
    let words = scenarios::soft_error::Params::default().words;
    let mut precise = 0;
    for r in runs("dcache") {
        match r {
            InjectionResult::PreciseAbort { address, .. }
                if (table..table + 4 * words).contains(&address) =>
            {
                precise += 1
            }
            other => return Err(format!("dcache: {other:?}")),
        }
    }
    ensure(precise == 100, format!("{precise}/100 precise aborts"))?;
    Ok(
        "200/200 icache+TCM injections corrected with extra cycles; 100/100 dcache precise aborts"
            .into(),
    )
}

// ---------------------------------------------------------------------------
// 8. MPU isolation
// ---------------------------------------------------------------------------

const _: () = assert!(MIN_REGION_SIZE < 4096);

fn criterion_mpu() -> Outcome {
    let report = scenario_passes("mpu_isolation")?;
    let m = &report.metrics;
    let probes = m["probes"].as_u64().unwrap_or(0);
    let cross = m["cross_region_probes"].as_u64().unwrap_or(0);
    let faults = m["faults"].as_array().map_or(0, Vec::len) as u64;
    ensure(probes == 64 && cross == 32, "probe matrix is not 64 probes")?;
    ensure(
        faults == cross,
        format!("{faults} faults for {cross} cross-region probes"),
    )?;

    let perms = Perms::default();
    ensure(
        MpuRegion::new(RAM, MIN_REGION_SIZE, perms)
            .validate()
            .is_ok(),
        "a 32-byte region is rejected",
    )?;
    ensure(
        MpuRegion::new(RAM, MIN_REGION_SIZE / 2, perms)
            .validate()
            .is_err(),
        "a 16-byte region is accepted",
    )?;
    Ok(format!(
        "all {cross} cross-region probes faulted, 0 landed; {} B minimum region",
        MIN_REGION_SIZE
    ))
}

// ---------------------------------------------------------------------------
// 9. Flash patch and breakpoint
// ---------------------------------------------------------------------------

fn criterion_fpb() -> Outcome {
    let mut src = String::from("start:\n");
    for k in 0..8 {
        src += &format!("bp{k}:\n    add r0, #1\n    nop\n");
    }
    src += "patched:\n    mov r1, #1\n    mov r2, #2\n    halt\n";
    let mut cfg = RunConfig::new(ProgramConfig::inline(src.clone(), LoadMode::Pool));
    cfg.fpb = (0..8)
        .map(|k| FpbSetting {
            entry: k,
            address: Addr::from(format!("bp{k}").as_str()),
            mode: FpbMode::Breakpoint,
            value: 0,
        })
        .collect();
    let prepared = cfg.prepare().map_err(|e| e.to_string())?;
    let mut m = prepared.boot().map_err(|e| e.to_string())?;
    for k in 0..8 {
        let want = prepared.image.symbol(&format!("bp{k}")).unwrap();
        let got = m.run();
        ensure(
            got == HaltReason::Breakpoint { address: want },
            format!("breakpoint {k}: {got:?}"),
        )?;
        ensure(m.cpu.regs[0] == k, format!("breakpoint {k} halted late"))?;
        m.resume();
    }
    ensure(
        m.run() == HaltReason::Halt,
        "did not finish after 8 breakpoints",
    )?;

    let ninth = m.mem.fpb_configure(8, 0x100, FpbMode::Breakpoint, 0);
    ensure(
        ninth == Err(FpbError::NoSuchEntry(8)),
        format!("9th entry: {ninth:?}"),
    )?;
    let mut over = cfg.clone();
    over.fpb.push(FpbSetting {
        entry: 8,
        address: Addr::from("patched"),
        mode: FpbMode::Breakpoint,
        value: 0,
    });
    let err = over.prepare().err().ok_or("9th entry accepted in config")?;
    ensure(
        err.path == "fpb[8]",
        format!("9th entry error at `{}`", err.path),
    )?;

    // Replace `mov r1, #1` with `mov r1, #99`, keeping the next halfword.
    let mut patch = RunConfig::new(ProgramConfig::inline(src, LoadMode::Pool));
    let img = assemble(&patch_src(&patch), LoadMode::Pool).map_err(|e| e.to_string())?;
    let at = img.symbol("patched").unwrap();
    let lo = encode_best(&Op::Mov {
        rd: r(1),
        src: Operand::Imm(99),
    })
    .unwrap()
    .to_bytes();
    let hi = encode_best(&Op::Mov {
        rd: r(2),
        src: Operand::Imm(2),
    })
    .unwrap()
    .to_bytes();
    ensure(
        lo.len() == 2 && hi.len() == 2 && at % 4 == 0,
        "patch site is not one word",
    )?;
    let value = u32::from_le_bytes([lo[0], lo[1], hi[0], hi[1]]);
    patch.fpb = vec![FpbSetting {
        entry: 0,
        address: Addr::Num(at),
        mode: FpbMode::Remap,
        value,
    }];
    let plain = harness::run(&RunConfig {
        fpb: vec![],
        ..patch.clone()
    })
    .map_err(|e| e.to_string())?;
    let patched = harness::run(&patch).map_err(|e| e.to_string())?;
    ensure(plain.report.registers[1] == 1, "unpatched run wrong")?;
    ensure(
        patched.report.registers[1] == 99 && patched.report.registers[2] == 2,
        format!(
            "patched run r1={} r2={}",
            patched.report.registers[1], patched.report.registers[2]
        ),
    )?;
    Ok(
        "8 breakpoints halted at their addresses; 9th entry rejected; remap patched mov r1 to #99"
            .into(),
    )
}

fn patch_src(c: &RunConfig) -> String {
    c.program.source.clone().unwrap_or_default()
}

// ---------------------------------------------------------------------------
// 10. Code density
// ---------------------------------------------------------------------------

fn criterion_density() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/programs/reference.s");
    let src = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let img = assemble(&src, LoadMode::Pool).map_err(|e| e.to_string())?;
    let size = img.code_size_report();
    // Recount from the instruction list.
    let mixed: u32 = img
        .instructions
        .iter()
        .map(|i| i.width_bits / 8)
        .sum::<u32>()
        + size.pool_bytes
        + size.data_bytes;
    let wide: u32 = 4 * img.instructions.len() as u32 + size.pool_bytes + size.data_bytes;
    ensure(
        mixed == size.total_bytes && wide == size.all_32_bit_bytes,
        "size report mismatch",
    )?;
    let ratio = mixed as f64 / wide as f64;
    ensure(ratio <= 0.70, format!("ratio {ratio:.3}"))?;

    let out = harness::run(
        &RunConfig::load(
            std::path::Path::new(concat!(
                env!("CARGO_MANIFEST_DIR"),
                "/programs/reference.toml"
            )),
            &[],
        )
        .map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    ensure(
        out.report.pass,
        "reference program did not run to completion",
    )?;
    Ok(format!(
        "reference program {mixed} B mixed vs {wide} B all-32-bit = {:.1}%",
        100.0 * ratio
    ))
}

// ---------------------------------------------------------------------------
// 11. Determinism
// ---------------------------------------------------------------------------

fn criterion_determinism() -> Outcome {
    let mut compared = 0;
    for name in scenarios::NAMES {
        let a = run_scenario(name, &[]).map_err(|e| e.to_string())?;
        let b = run_scenario(name, &[]).map_err(|e| e.to_string())?;
        ensure(
            a.report.to_json() == b.report.to_json(),
            format!("{name}: reports differ"),
        )?;
        for (trace, _) in &a.traces {
            ensure(
                a.trace_jsonl(trace) == b.trace_jsonl(trace),
                format!("{name}/{trace}: traces differ"),
            )?;
            compared += 1;
        }
    }
    let mut seeded = vec![];
    for _ in 0..2 {
        let out = run_scenario("soft_error", &["seed=99".into(), "mixed=20".into()])
            .map_err(|e| e.to_string())?;
        seeded.push(serde_json::to_string(&out.report.metrics).unwrap_or_default());
    }
    ensure(seeded[0] == seeded[1], "seeded campaign differs")?;
    let _: Value = serde_json::from_str(&seeded[0]).map_err(|e| e.to_string())?;
    Ok(format!(
        "{} scenarios x 2 runs: byte-identical reports and {compared} traces",
        scenarios::NAMES.len()
    ))
}

type Criterion = (&'static str, u64, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("instruction oracles", 10, criterion_instructions),
        ("IT-block equivalence", 30, criterion_it_blocks),
        ("bit-band", 10, criterion_bitband),
        ("literal-pool penalty", 5, criterion_literal_pool),
        ("tail-chaining", 5, criterion_tail_chain),
        ("interruptible LDM", 5, criterion_ldm),
        ("soft-error campaigns", 60, criterion_soft_error),
        ("MPU isolation", 5, criterion_mpu),
        ("flash patch and breakpoint", 5, criterion_fpb),
        ("code density", 5, criterion_density),
        ("determinism", 10, criterion_determinism),
    ];
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = f();
        let took = t.elapsed();
        let outcome = match outcome {
            Ok(d) if took > Duration::from_secs(*budget) => {
                Err(format!("{d}; took {took:.2?}, budget {budget}s"))
            }
            o => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({took:.2?}): {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({took:.2?}): {detail}", i + 1);
            }
        }
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
