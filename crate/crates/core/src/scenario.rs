//! Declarative experiment descriptions.
//!
//! Scenarios are TOML files. Every key is explicit and unknown keys are
//! rejected. The built-in presets are ordinary scenario files compiled into
//! the binary; see `presets/` in this crate.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::EngineConfig;
use crate::firewall::{calibrate, table1, CalibrationError, ControllerMode, LatencyModel};
use crate::sim::{AttackerModel, ProxyModel, UaGroup};
use crate::Seconds;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub horizon_s: Seconds,
    pub seeds: Vec<u64>,
    /// Allows a scenario without any traffic source.
    #[serde(default)]
    pub null_run: bool,
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
    #[serde(default = "default_sweep")]
    pub expiry_sweep_s: Seconds,
    /// Installs per capacity window when measuring rule-adding speed.
    #[serde(default = "default_window")]
    pub capacity_window: usize,
    #[serde(default)]
    pub engine: EngineConfig,
    #[serde(default = "default_controller")]
    pub controller: ControllerMode,
    #[serde(default)]
    pub latency: LatencySpec,
    #[serde(default)]
    pub proxy: ProxyModel,
    #[serde(default)]
    pub uas: Vec<UaGroup>,
    #[serde(default)]
    pub attackers: Vec<AttackerModel>,
}

fn default_outputs() -> PathBuf {
    PathBuf::from("out")
}

fn default_sweep() -> Seconds {
    60.0
}

fn default_window() -> usize {
    1000
}

fn default_controller() -> ControllerMode {
    ControllerMode::RealTime
}

/// Either explicit coefficients or the fit to the built-in capacity table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatencySpec {
    Named(NamedLatency),
    Explicit(LatencyModel),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NamedLatency {
    #[serde(rename = "calibrate-from-table1")]
    CalibrateFromTable1,
    #[serde(rename = "zero")]
    Zero,
}

impl Default for LatencySpec {
    fn default() -> Self {
        LatencySpec::Named(NamedLatency::CalibrateFromTable1)
    }
}

impl LatencySpec {
    pub fn resolve(&self) -> Result<LatencyModel, ScenarioError> {
        match self {
            LatencySpec::Named(NamedLatency::CalibrateFromTable1) => {
                Ok(calibrate(&table1())?.model)
            }
            LatencySpec::Named(NamedLatency::Zero) => Ok(LatencyModel::ZERO),
            LatencySpec::Explicit(model) => Ok(*model),
        }
    }
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{origin}: {message}")]
    Syntax { origin: String, message: String },
    #[error("scenario {name:?}: {problem}")]
    Invalid { name: String, problem: String },
    #[error("latency calibration failed: {0}")]
    Calibration(#[from] CalibrationError),
}

impl Scenario {
    /// Parses and validates a scenario. `origin` names the source in
    /// diagnostics.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| ScenarioError::Syntax {
            origin: origin.to_string(),
            message: describe_toml_error(text, &e),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let fail = |problem: String| {
            Err(ScenarioError::Invalid {
                name: self.name.clone(),
                problem,
            })
        };
        if !(self.horizon_s > 0.0 && self.horizon_s.is_finite()) {
            return fail(format!("horizon_s must be > 0, got {}", self.horizon_s));
        }
        if self.seeds.is_empty() {
            return fail("seeds must not be empty".into());
        }
        if !self.null_run && self.uas.is_empty() && self.attackers.is_empty() {
            return fail("no traffic source; set null_run = true for an empty run".into());
        }
        if !positive(self.expiry_sweep_s) {
            return fail("expiry_sweep_s must be > 0".into());
        }
        if self.capacity_window == 0 {
            return fail("capacity_window must be > 0".into());
        }
        if !positive(self.engine.expiry_after_idle) {
            return fail("engine.expiry_after_idle_s must be > 0".into());
        }
        if let ControllerMode::Batched { interval } = self.controller {
            if !positive(interval) {
                return fail("controller.interval_s must be > 0".into());
            }
        }
        if let LatencySpec::Explicit(model) = &self.latency {
            if !model.is_valid() {
                return fail("latency coefficients must be >= 0".into());
            }
        }
        let p = &self.proxy;
        if !(p.delay_normal > 0.0 && p.delay_emergency >= p.delay_normal) {
            return fail(
                "proxy delays must satisfy 0 < delay_normal_s <= delay_emergency_s".into(),
            );
        }
        for (i, g) in self.uas.iter().enumerate() {
            if !positive(g.t1_s) {
                return fail(format!("uas[{i}].t1_s must be > 0"));
            }
            if g.give_up_after_s < g.t1_s {
                return fail(format!("uas[{i}].give_up_after_s must be >= t1_s"));
            }
            if g.start_s < 0.0 || g.jitter_s < 0.0 || !positive(g.interval_s) {
                return fail(format!(
                    "uas[{i}] times must be non-negative, interval_s > 0"
                ));
            }
        }
        for (i, a) in self.attackers.iter().enumerate() {
            if !(a.rate() > 0.0 && a.rate().is_finite()) {
                return fail(format!("attackers[{i}].rate must be > 0"));
            }
            if a.total() == 0 {
                return fail(format!("attackers[{i}].total must be > 0"));
            }
            if a.start_s() < 0.0 {
                return fail(format!("attackers[{i}].start_s must be >= 0"));
            }
            match *a {
                AttackerModel::FixedSpoofSet { pool_size: 0, .. } => {
                    return fail(format!("attackers[{i}].pool_size must be >= 1"));
                }
                AttackerModel::ConformingFlood { repeats, t1_s, .. } => {
                    if repeats == 0 {
                        return fail(format!("attackers[{i}].repeats must be >= 1"));
                    }
                    if !positive(t1_s) {
                        return fail(format!("attackers[{i}].t1_s must be > 0"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// False for NaN as well as for values <= 0.
fn positive(x: f64) -> bool {
    x > 0.0
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Scenario::from_toml_str(&text, &path.display().to_string())
}

fn describe_toml_error(text: &str, err: &toml::de::Error) -> String {
    let message = err.message().trim().to_string();
    match err.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            let content = text.lines().nth(line - 1).unwrap_or_default().trim();
            format!("line {line}: {message} (`{content}`)")
        }
        None => message,
    }
}

/// A scenario shipped with the crate.
#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub source: &'static str,
}

impl Preset {
    pub fn scenario(&self) -> Scenario {
        Scenario::from_toml_str(self.source, self.name).expect("built-in preset is valid")
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "operation",
        source: include_str!("../presets/operation.toml"),
    },
    Preset {
        name: "setup-delay",
        source: include_str!("../presets/setup-delay.toml"),
    },
    Preset {
        name: "perf-realtime-10k",
        source: include_str!("../presets/perf-realtime-10k.toml"),
    },
    Preset {
        name: "perf-batched-10k",
        source: include_str!("../presets/perf-batched-10k.toml"),
    },
    Preset {
        name: "perf-batched-50k",
        source: include_str!("../presets/perf-batched-50k.toml"),
    },
    Preset {
        name: "rate-halving",
        source: include_str!("../presets/rate-halving.toml"),
    },
    Preset {
        name: "deferred-flood",
        source: include_str!("../presets/deferred-flood.toml"),
    },
    Preset {
        name: "deferred-ua",
        source: include_str!("../presets/deferred-ua.toml"),
    },
];

pub fn preset(name: &str) -> Option<Scenario> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .map(Preset::scenario)
}
