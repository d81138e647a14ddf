use std::path::Path;
use std::process::{Command, Output};

fn thumbsim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_thumbsim"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const PROGRAM: &str = "start:\n    mov r0, #5\n    add r0, #2\n    halt\n";

#[test]
fn assemble_writes_binary_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "p.s", PROGRAM);
    let out = thumbsim(
        &["assemble", "p.s", "--mode", "movw", "-o", "p.bin"],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let bin = std::fs::read(dir.path().join("p.bin")).unwrap();
    assert_eq!(bin.len(), 6);
    let sidecar: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("p.json")).unwrap()).unwrap();
    assert_eq!(sidecar["symbols"]["start"], 0);
    assert_eq!(sidecar["mode"], "movw");
    assert_eq!(sidecar["code_size"]["instructions_16"], 3);
}

#[test]
fn assembly_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.s", "frob r0\n");
    let out = thumbsim(&["assemble", "bad.s"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("frob"));
}

#[test]
fn run_writes_report_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "p.s", PROGRAM);
    write(
        dir.path(),
        "run.toml",
        "name = \"t\"\n[program]\npath = \"p.s\"\n[[expect]]\nregister = \"r0\"\nequals = 7\n",
    );
    let out = thumbsim(
        &[
            "run", "run.toml", "--report", "r.json", "--trace", "t.jsonl",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["retired"], 3);
    assert_eq!(report["pass"], true);
    let trace = std::fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = trace
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let cycles: u64 = lines.iter().map(|r| r["cycles"].as_u64().unwrap()).sum();
    assert_eq!(cycles, report["cycles"].as_u64().unwrap());
}

#[test]
fn failed_expectation_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "p.s", PROGRAM);
    write(
        dir.path(),
        "run.toml",
        "[program]\npath = \"p.s\"\n[[expect]]\nregister = \"r0\"\nequals = 7\n",
    );
    let out = thumbsim(&["run", "run.toml", "expect[0].equals=8"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn config_errors_exit_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    write(
        dir.path(),
        "run.toml",
        "[program]\nsource = \"halt\"\n[mpu]\nenabled = \"yes\"\n",
    );
    let out = thumbsim(&["run", "run.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mpu.enabled"));

    let out = thumbsim(&["scenario", "nope"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scenario_with_override_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = thumbsim(
        &[
            "scenario",
            "tail_chain",
            "gap=4",
            "--report",
            "r.json",
            "--trace-dir",
            "tr",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["params"]["gap"], 4);
    assert_eq!(report["metrics"]["saving_cycles"], 12);
    assert!(dir.path().join("tr/tail_chain.chained.jsonl").exists());
}

#[test]
fn all_scenarios_report_in_fixed_order() {
    let dir = tempfile::tempdir().unwrap();
    let a = thumbsim(&["scenario", "all"], dir.path());
    let b = thumbsim(&["scenario", "all"], dir.path());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["scenarios"].as_object().unwrap().len(), 5);
}

#[test]
fn inject_runs_a_seeded_mixed_campaign() {
    let dir = tempfile::tempdir().unwrap();
    let out = thumbsim(&["inject", "--seed", "7", "--count", "30"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mixed = &v["metrics"]["campaigns"]["mixed"];
    assert_eq!(mixed["seed"], 7);
    assert_eq!(mixed["runs"].as_array().unwrap().len(), 30);
}
