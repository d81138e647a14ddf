//! Configuration documents, single runs, soft-error campaigns and the
//! built-in scenarios. Everything here is deterministic: a report is a pure
//! function of its configuration.

mod campaign;
mod config;
mod overrides;
mod report;
pub mod scenarios;

use std::fmt;

pub use campaign::{
    run_campaign, CampaignReport, CampaignRun, CampaignSpec, CampaignTarget, InjectionResult,
    Structure,
};
pub use config::{
    default_memory, Addr, Expectation, FpbSetting, MemInit, MpuRegionSetting, MpuSettings,
    Prepared, ProgramConfig, RawImage, RunConfig, TimedInjection, DEFAULT_CYCLE_LIMIT,
};
pub use overrides::{apply_override, apply_overrides, parse_override};
pub use report::{Assertion, EventCounts, InjectionReport, RunOutcome, RunReport, RunStatus};

/// A configuration problem, located by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl fmt::Display) -> ConfigError {
        ConfigError {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            f.write_str(&self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

/// Runs a configuration: the main run, scheduled injections, and the
/// optional seeded campaign.
pub fn run(config: &RunConfig) -> Result<RunOutcome, ConfigError> {
    let prepared = config.prepare()?;
    report::execute(&prepared)
}
