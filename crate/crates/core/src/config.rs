//! Engine configuration, validation, and the stable config digest.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::eprocess::{build_grid, Centering, EstimatorConfig, LambdaGrid, PenaltyKind};
use crate::lift::LiftConfig;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid config `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub k: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            k: 12,
            lambda_min: 0.02,
            lambda_max: 0.6,
        }
    }
}

/// How a skipped step is accounted for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Skipped steps update nothing.
    #[default]
    Bypass,
    /// Skipped steps feed `X_t = 0` through estimator and e-process.
    ZeroUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipConfig {
    pub enabled: bool,
    /// Skip when `H_{t-1} - H_{t-2} >= threshold`. `+inf` never skips.
    pub threshold: f64,
    pub mode: SkipMode,
}

impl Default for SkipConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            threshold: 0.0,
            mode: SkipMode::Bypass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub enabled: bool,
    /// Reset when `|mu_recent - mu_overall| > tau_d`, nats.
    pub tau_d: f64,
    /// Number of accepted increments in the recent window.
    pub window: usize,
    /// Highest segment index allowed; a reset past it ends the run.
    pub max_segments: u32,
    /// Unconditional reset every this many steps within a segment.
    pub forced_period: Option<u64>,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            tau_d: 0.10,
            window: 50,
            max_segments: 32,
            forced_period: None,
        }
    }
}

impl DriftConfig {
    /// The stricter deployment preset (gap above half a nat).
    pub fn production() -> Self {
        Self {
            tau_d: 0.5,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    pub enabled: bool,
    pub tau_c: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            tau_c: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Total error budget across all segments.
    pub delta: f64,
    #[serde(flatten)]
    pub lift: LiftConfig,
    pub grid: GridConfig,
    #[serde(flatten)]
    pub estimator: EstimatorConfig,
    pub penalty: PenaltyKind,
    pub centering: Centering,
    pub strict_predictable: bool,
    pub skip: SkipConfig,
    pub drift: DriftConfig,
    pub gate: GateConfig,
    pub max_steps: u64,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            delta: 0.10,
            lift: LiftConfig::default(),
            grid: GridConfig::default(),
            estimator: EstimatorConfig::default(),
            penalty: PenaltyKind::Gaussian,
            centering: Centering::Ema,
            strict_predictable: false,
            skip: SkipConfig::default(),
            drift: DriftConfig::default(),
            gate: GateConfig::default(),
            max_steps: 150,
            seed: 42,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(ConfigError::new("delta", format!("must lie in (0, 1), got {}", self.delta)));
        }
        self.lift
            .validate()
            .map_err(|e| ConfigError::new("lift", e.to_string()))?;
        self.estimator
            .validate()
            .map_err(|e| ConfigError::new("estimator", e.to_string()))?;
        self.lambda_grid()?;
        if let Centering::Fixed { mean } = self.centering {
            if !(mean >= 0.0 && mean <= self.lift.clip_bound) {
                return Err(ConfigError::new(
                    "centering",
                    format!("fixed mean {mean} outside [0, clip_bound]"),
                ));
            }
        }
        if self.skip.threshold.is_nan() {
            return Err(ConfigError::new("skip.threshold", "must not be NaN"));
        }
        if self.drift.window == 0 {
            return Err(ConfigError::new("drift.window", "must be at least 1"));
        }
        if !(self.drift.tau_d >= 0.0 && self.drift.tau_d.is_finite()) {
            return Err(ConfigError::new("drift.tau_d", format!("must be nonnegative, got {}", self.drift.tau_d)));
        }
        if self.drift.max_segments == 0 {
            return Err(ConfigError::new("drift.max_segments", "must be at least 1"));
        }
        if self.drift.forced_period == Some(0) {
            return Err(ConfigError::new("drift.forced_period", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.gate.tau_c) {
            return Err(ConfigError::new("gate.tau_c", format!("must lie in [0, 1], got {}", self.gate.tau_c)));
        }
        if self.max_steps == 0 {
            return Err(ConfigError::new("max_steps", "must be at least 1"));
        }
        Ok(())
    }

    pub fn lambda_grid(&self) -> Result<LambdaGrid, ConfigError> {
        build_grid(
            self.grid.k,
            self.grid.lambda_min,
            self.grid.lambda_max,
            self.lift.increment_bound,
        )
        .map_err(|e| ConfigError::new("grid", e.to_string()))
    }

    /// Hex SHA-256 over the canonical JSON form (keys sorted, shortest
    /// round-trip floats). Independent of key order in any source file.
    pub fn digest(&self) -> String {
        digest_of(self)
    }
}

/// Canonical digest of any serializable value.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    // Value maps are ordered by key, so this is a canonical rendering.
    let canonical = serde_json::to_value(value).expect("config values serialize to JSON");
    let bytes = serde_json::to_vec(&canonical).expect("JSON values render");
    hex::encode(Sha256::digest(&bytes))
}
