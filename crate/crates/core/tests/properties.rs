use proptest::prelude::*;

use thumbsim::asm::LoadMode;
use thumbsim::harness::scenarios::run_scenario;
use thumbsim::harness::{self, apply_override, ProgramConfig, RunConfig};
use thumbsim::trace::TraceKind;

fn instruction() -> impl Strategy<Value = String> {
    let reg = 0u8..8;
    prop_oneof![
        (reg.clone(), 0u32..256).prop_map(|(d, i)| format!("mov r{d}, #{i}")),
        (reg.clone(), reg.clone(), reg.clone())
            .prop_map(|(d, n, m)| format!("add r{d}, r{n}, r{m}")),
        (reg.clone(), reg.clone(), reg.clone())
            .prop_map(|(d, n, m)| format!("eor r{d}, r{n}, r{m}")),
        (reg.clone(), reg.clone(), 1u32..32).prop_map(|(d, n, s)| format!("lsr r{d}, r{n}, #{s}")),
        (reg.clone(), 0u32..256).prop_map(|(n, i)| format!("cmp r{n}, #{i}")),
        (reg.clone(), reg.clone(), reg.clone())
            .prop_map(|(d, n, m)| format!("udiv r{d}, r{n}, r{m}")),
        (reg.clone(), reg.clone()).prop_map(|(d, n)| format!("rbit r{d}, r{n}")),
        (reg.clone(), any::<u32>()).prop_map(|(d, v)| format!("ldr r{d}, ={v:#x}")),
        (reg.clone(), 0u32..64).prop_map(|(d, off)| format!("str r{d}, [r7, #{}]", 4 * off)),
        (reg, 0u32..64).prop_map(|(d, off)| format!("ldr r{d}, [r7, #{}]", 4 * off)),
    ]
}

fn program(body: &[String]) -> String {
    let mut s = String::from("start:\n    ldr r7, =0x20000100\n");
    for i in body {
        // r7 stays the RAM base for the memory operations.
        let i = if i.split_whitespace().nth(1) == Some("r7,") && !i.starts_with("str") {
            i.replacen("r7,", "r6,", 1)
        } else {
            i.clone()
        };
        s += &format!("    {i}\n");
    }
    s + "    halt\n"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ledger_closes_and_runs_repeat(
        body in prop::collection::vec(instruction(), 1..40),
        movw in any::<bool>(),
    ) {
        let mode = if movw { LoadMode::Movw } else { LoadMode::Pool };
        let cfg = RunConfig::new(ProgramConfig::inline(program(&body), mode));
        let a = harness::run(&cfg).unwrap();
        let b = harness::run(&cfg).unwrap();
        prop_assert!(a.report.pass, "{:?}", a.report.assertions);
        prop_assert_eq!(a.report.to_json(), b.report.to_json());
        prop_assert_eq!(a.trace_jsonl(), b.trace_jsonl());
        let total: u64 = a.trace.records().iter().map(|r| r.cycles as u64).sum();
        prop_assert_eq!(total, a.report.cycles);
        // A constant load is one instruction in pool mode, two in movw mode.
        let constants = 1 + body.iter().filter(|i| i.contains('=')).count() as u64;
        let expected = body.len() as u64 + 2 + if movw { constants } else { 0 };
        prop_assert_eq!(a.trace.count(TraceKind::Retire), expected);
    }

    #[test]
    fn both_load_modes_compute_the_same_registers(
        body in prop::collection::vec(instruction(), 1..40),
    ) {
        let run = |mode| {
            harness::run(&RunConfig::new(ProgramConfig::inline(program(&body), mode)))
                .unwrap()
                .report
        };
        let (pool, movw) = (run(LoadMode::Pool), run(LoadMode::Movw));
        prop_assert_eq!(&pool.registers[..13], &movw.registers[..13]);
        prop_assert_eq!(pool.flags, movw.flags);
    }

    #[test]
    fn numeric_overrides_land_where_addressed(limit in 1u64..1_000_000, idx in 0usize..3) {
        let mut doc: toml::Table = toml::from_str(
            "cycle_limit = 5\n[program]\nsource = \"halt\"\n[[stimuli]]\nline = 0\n\
             [[stimuli]]\nline = 0\n[[stimuli]]\nline = 0\n",
        )
        .unwrap();
        apply_override(&mut doc, "cycle_limit", toml::Value::Integer(limit as i64)).unwrap();
        apply_override(&mut doc, &format!("stimuli[{idx}].at_cycle"), toml::Value::Integer(7)).unwrap();
        let cfg = RunConfig::from_table(doc).unwrap();
        prop_assert_eq!(cfg.cycle_limit, limit);
        for (i, s) in cfg.stimuli.iter().enumerate() {
            prop_assert_eq!(s.at_cycle, (i == idx).then_some(7));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn seeded_campaigns_replay(seed in 0..=i64::MAX as u64) {
        let overrides = [
            format!("seed={seed}"),
            "icache=0".into(),
            "tcm=0".into(),
            "dcache=0".into(),
            "mixed=12".into(),
        ];
        let a = run_scenario("soft_error", &overrides).unwrap();
        let b = run_scenario("soft_error", &overrides).unwrap();
        prop_assert_eq!(a.report.to_json(), b.report.to_json());
        prop_assert!(a.report.pass, "{:?}", a.report.assertions);
    }
}
