use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thumbsim::asm::{assemble, LoadMode};
use thumbsim::harness::scenarios::{self, ScenarioOutput};
use thumbsim::harness::{self, ConfigError, RunConfig};

#[derive(Parser)]
#[command(
    name = "thumbsim",
    version,
    about = "Cycle-accounting simulator for a Thumb-2-style core"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Assemble a source file into a flat binary and a JSON sidecar.
    Assemble {
        source: PathBuf,
        #[arg(long, default_value = "pool")]
        mode: LoadMode,
        /// Binary output; the sidecar goes next to it with a .json extension.
        #[arg(short = 'o', long)]
        output: Option<PathBuf>,
    },
    /// Run a configuration document.
    Run {
        config: PathBuf,
        /// Write the event trace (JSON lines) here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the report here instead of standard output.
        #[arg(long)]
        report: Option<PathBuf>,
        /// `path=value` settings applied to the document before parsing.
        overrides: Vec<String>,
    },
    /// Run a named scenario, or `all` of them.
    Scenario {
        name: String,
        overrides: Vec<String>,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write each representative run's trace into this directory.
        #[arg(long)]
        trace_dir: Option<PathBuf>,
    },
    /// Run a mixed soft-error campaign over the checksum workload.
    Inject {
        /// Campaign seed (0 to 2^63 - 1).
        #[arg(long, value_parser = clap::value_parser!(u64).range(..=i64::MAX as u64))]
        seed: u64,
        #[arg(long)]
        count: u32,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

enum Failure {
    Config(ConfigError),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e)
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    std::fs::write(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn emit(report: Option<&Path>, json: String) -> Result<(), Failure> {
    match report {
        Some(p) => write(p, (json + "\n").as_bytes()),
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{json}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    Err(Failure::Io(format!("stdout: {e}")))
                }
                _ => Ok(()),
            }
        }
    }
}

fn summarize(out: &ScenarioOutput) {
    let r = &out.report;
    eprintln!("{} {}", if r.pass { "PASS" } else { "FAIL" }, r.scenario);
    for a in r.assertions.iter().filter(|a| !a.pass) {
        eprintln!("  failed {}: {}", a.name, a.detail);
    }
}

fn write_traces(dir: &Path, out: &ScenarioOutput) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    for (name, _) in &out.traces {
        let bytes = out.trace_jsonl(name).unwrap_or_default();
        write(
            &dir.join(format!("{}.{name}.jsonl", out.report.scenario)),
            &bytes,
        )?;
    }
    Ok(())
}

fn scenario(
    name: &str,
    overrides: &[String],
    report: Option<&Path>,
    trace_dir: Option<&Path>,
) -> Result<bool, Failure> {
    if name != "all" {
        let out = scenarios::run_scenario(name, overrides)?;
        summarize(&out);
        if let Some(dir) = trace_dir {
            write_traces(dir, &out)?;
        }
        emit(report, out.report.to_json())?;
        return Ok(out.report.pass);
    }
    if !overrides.is_empty() {
        return Err(ConfigError::new("overrides", "not accepted with `all`").into());
    }
    // Independent machines per scenario; results are collected in name order.
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = scenarios::NAMES
            .iter()
            .map(|n| s.spawn(move || scenarios::run_scenario(n, &[])))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("scenario thread panicked"))
            .collect()
    });
    let mut pass = true;
    let mut reports = serde_json::Map::new();
    for r in results {
        let out = r?;
        summarize(&out);
        if let Some(dir) = trace_dir {
            write_traces(dir, &out)?;
        }
        pass &= out.report.pass;
        reports.insert(
            out.report.scenario.clone(),
            serde_json::to_value(&out.report).unwrap_or_default(),
        );
    }
    let all = serde_json::json!({ "pass": pass, "scenarios": reports });
    emit(
        report,
        serde_json::to_string_pretty(&all).unwrap_or_default(),
    )?;
    Ok(pass)
}

fn execute(cmd: Command) -> Result<bool, Failure> {
    match cmd {
        Command::Assemble {
            source,
            mode,
            output,
        } => {
            let text = std::fs::read_to_string(&source)
                .map_err(|e| Failure::Io(format!("{}: {e}", source.display())))?;
            let image = assemble(&text, mode).map_err(|e| {
                ConfigError::new(
                    source.display().to_string(),
                    format!("assembly failed: {e}"),
                )
            })?;
            let out = output.unwrap_or_else(|| source.with_extension("bin"));
            let (base, bytes) = image.flat_binary();
            write(&out, &bytes)?;
            let sidecar = serde_json::to_string_pretty(&image.sidecar()).unwrap_or_default();
            write(&out.with_extension("json"), (sidecar + "\n").as_bytes())?;
            let size = image.code_size_report();
            eprintln!(
                "{}: {} bytes at {base:#010x}, {}",
                out.display(),
                bytes.len(),
                serde_json::to_string(&size).unwrap_or_default()
            );
            Ok(true)
        }
        Command::Run {
            config,
            trace,
            report,
            overrides,
        } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let out = harness::run(&cfg)?;
            if let Some(t) = trace {
                write(&t, &out.trace_jsonl())?;
            }
            emit(report.as_deref(), out.report.to_json())?;
            Ok(out.report.pass)
        }
        Command::Scenario {
            name,
            overrides,
            report,
            trace_dir,
        } => scenario(&name, &overrides, report.as_deref(), trace_dir.as_deref()),
        Command::Inject {
            seed,
            count,
            report,
        } => {
            let overrides: Vec<String> = [
                format!("seed={seed}"),
                format!("mixed={count}"),
                "icache=0".into(),
                "tcm=0".into(),
                "dcache=0".into(),
            ]
            .into();
            scenario("soft_error", &overrides, report.as_deref(), None)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
