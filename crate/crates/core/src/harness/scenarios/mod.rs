//! Built-in experiments. Each takes a parameter document (defaults plus
//! `path=value` overrides) and returns a report whose `pass` field is the
//! conjunction of its assertions.

pub mod bitband_semaphore;
pub mod literal_pool;
pub mod mpu_isolation;
pub mod soft_error;
pub mod tail_chain;

use std::collections::BTreeMap;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::overrides::apply_overrides;
use super::report::{Assertion, RunReport};
use super::ConfigError;
use crate::trace::Trace;

pub const NAMES: [&str; 5] = [
    "literal_pool",
    "tail_chain",
    "bitband_semaphore",
    "soft_error",
    "mpu_isolation",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub params: serde_json::Value,
    pub runs: BTreeMap<String, RunReport>,
    pub metrics: serde_json::Value,
    pub assertions: Vec<Assertion>,
    pub pass: bool,
}

impl ScenarioReport {
    pub fn new(scenario: &str, params: &impl Serialize) -> ScenarioReport {
        ScenarioReport {
            scenario: scenario.to_string(),
            params: serde_json::to_value(params).unwrap_or_default(),
            runs: BTreeMap::new(),
            metrics: serde_json::Value::Null,
            assertions: Vec::new(),
            pass: true,
        }
    }

    pub fn check(&mut self, a: Assertion) {
        self.pass &= a.pass;
        self.assertions.push(a);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

#[derive(Debug)]
pub struct ScenarioOutput {
    pub report: ScenarioReport,
    /// Named event traces of the representative runs.
    pub traces: Vec<(String, Trace)>,
}

impl ScenarioOutput {
    pub fn trace_jsonl(&self, name: &str) -> Option<Vec<u8>> {
        let (_, t) = self.traces.iter().find(|(n, _)| n == name)?;
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).ok()?;
        Some(buf)
    }
}

/// Default parameters with overrides applied.
pub fn params<P: Serialize + DeserializeOwned + Default>(
    overrides: &[String],
) -> Result<P, ConfigError> {
    let mut table = toml::Table::try_from(P::default())
        .map_err(|e| ConfigError::new("", format!("parameters do not serialize: {e}")))?;
    apply_overrides(&mut table, overrides)?;
    serde_path_to_error::deserialize(toml::Value::Table(table))
        .map_err(|e| ConfigError::new(e.path().to_string(), e.inner()))
}

pub fn run_scenario(name: &str, overrides: &[String]) -> Result<ScenarioOutput, ConfigError> {
    match name {
        "literal_pool" => literal_pool::run(&params(overrides)?),
        "tail_chain" => tail_chain::run(&params(overrides)?),
        "bitband_semaphore" => bitband_semaphore::run(&params(overrides)?),
        "soft_error" => soft_error::run(&params(overrides)?),
        "mpu_isolation" => mpu_isolation::run(&params(overrides)?),
        other => Err(ConfigError::new(
            "scenario",
            format!("unknown scenario `{other}` (known: {})", NAMES.join(", ")),
        )),
    }
}

pub(crate) fn same_registers(a: &RunReport, b: &RunReport) -> bool {
    a.registers[..13] == b.registers[..13]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn failed(r: &ScenarioReport) -> Vec<&Assertion> {
        r.assertions.iter().filter(|a| !a.pass).collect()
    }

    #[test]
    fn every_scenario_passes_with_defaults() {
        for name in NAMES {
            let out = run_scenario(name, &[]).unwrap();
            assert!(out.report.pass, "{name}: {:#?}", failed(&out.report));
        }
    }

    #[test]
    fn unknown_scenario_is_a_config_error() {
        assert!(run_scenario("nope", &[]).is_err());
    }

    #[test]
    fn bad_parameter_names_the_field() {
        let e = run_scenario("tail_chain", &["gap=\"x\"".into()]).unwrap_err();
        assert!(e.path.contains("gap"), "{e}");
        let e = run_scenario("tail_chain", &["bogus=1".into()]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn mpu_disabled_lets_every_probe_land() {
        let out = run_scenario("mpu_isolation", &["mpu_enabled=false".into()]).unwrap();
        assert!(out.report.pass, "{:#?}", failed(&out.report));
    }
}
