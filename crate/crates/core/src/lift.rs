//! Token records and clipped information-lift increments.
//!
//! The lift of an emitted token is the log-ratio between the probability the
//! full model assigned to it and the probability the skeleton assigned to it,
//! clamped into `[0, B]`:
//!
//! ```text
//! X_t = min(max(ln(p_t / s_t), 0), B)        (X_t = 0 when s_t = 0)
//! ```
//!
//! Nonnegative bounded increments are what the e-process machinery downstream
//! relies on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default clip bound `B`, in nats.
pub const DEFAULT_CLIP_BOUND: f64 = 8.0;

/// Default increment bound `c`, in nats, used to cap the lambda grid.
pub const DEFAULT_INCREMENT_BOUND: f64 = 0.18;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LiftError {
    #[error("malformed record: field `{field}` has invalid value {value}")]
    MalformedRecord { field: &'static str, value: f64 },

    #[error("invalid lift config: {0}")]
    InvalidConfig(String),
}

/// One generation step of a token stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    /// 1-based step counter.
    pub index: u64,
    /// Probability the full model assigned to the emitted token, in `(0, 1]`.
    pub full_prob: f64,
    /// Probability the skeleton assigned to the emitted token, in `[0, 1]`.
    pub skeleton_prob: f64,
    /// Full-model next-token entropy in nats. Absent when the producer did not
    /// report it; the skip rule is disabled for steps that depend on it.
    pub entropy: Option<f64>,
    pub is_boundary: bool,
    pub verifier_score: Option<f64>,
    /// Debugging aid only.
    pub token_text: Option<String>,
}

impl TokenRecord {
    /// Minimal record with no entropy, boundary or verifier information.
    pub fn new(index: u64, full_prob: f64, skeleton_prob: f64) -> Self {
        Self {
            index,
            full_prob,
            skeleton_prob,
            entropy: None,
            is_boundary: false,
            verifier_score: None,
            token_text: None,
        }
    }

    pub fn with_entropy(mut self, entropy: f64) -> Self {
        self.entropy = Some(entropy);
        self
    }

    pub fn with_boundary(mut self, is_boundary: bool) -> Self {
        self.is_boundary = is_boundary;
        self
    }

    pub fn with_verifier(mut self, score: f64) -> Self {
        self.verifier_score = Some(score);
        self
    }

    /// Checks the per-field invariants. Ordering of indices is a stream-level
    /// property and is checked by the consumer.
    pub fn validate(&self) -> Result<(), LiftError> {
        let p = self.full_prob;
        if !(p > 0.0 && p <= 1.0) {
            return Err(LiftError::MalformedRecord { field: "full_prob", value: p });
        }
        let s = self.skeleton_prob;
        if !(0.0..=1.0).contains(&s) {
            return Err(LiftError::MalformedRecord { field: "skeleton_prob", value: s });
        }
        if let Some(h) = self.entropy {
            if !(h >= 0.0 && h.is_finite()) {
                return Err(LiftError::MalformedRecord { field: "entropy", value: h });
            }
        }
        if let Some(v) = self.verifier_score {
            if !(0.0..=1.0).contains(&v) {
                return Err(LiftError::MalformedRecord { field: "verifier_score", value: v });
            }
        }
        Ok(())
    }
}

/// Bounds used by the lift computation and by the lambda grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LiftConfig {
    /// `B`: increments are clipped into `[0, B]`.
    pub clip_bound: f64,
    /// `c`: grid values must satisfy `lambda < 1 / c`.
    pub increment_bound: f64,
}

impl Default for LiftConfig {
    fn default() -> Self {
        Self {
            clip_bound: DEFAULT_CLIP_BOUND,
            increment_bound: DEFAULT_INCREMENT_BOUND,
        }
    }
}

impl LiftConfig {
    pub fn validate(&self) -> Result<(), LiftError> {
        if !(self.clip_bound > 0.0 && self.clip_bound.is_finite()) {
            return Err(LiftError::InvalidConfig(format!(
                "clip_bound must be positive and finite, got {}",
                self.clip_bound
            )));
        }
        if !(self.increment_bound > 0.0 && self.increment_bound.is_finite()) {
            return Err(LiftError::InvalidConfig(format!(
                "increment_bound must be positive and finite, got {}",
                self.increment_bound
            )));
        }
        Ok(())
    }

    /// Supremum of admissible grid values, `1 / c`.
    pub fn lambda_ceiling(&self) -> f64 {
        1.0 / self.increment_bound
    }
}

/// A single clipped lift observation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LiftIncrement {
    /// `X_t` in nats, within `[0, B]`.
    pub value: f64,
    pub was_clipped_high: bool,
    /// The raw log-ratio was strictly negative, or the skeleton assigned zero
    /// probability.
    pub was_zeroed: bool,
    /// The skip rule fired; the value has been forced to zero for accounting.
    pub was_skipped: bool,
}

impl LiftIncrement {
    /// The accounting increment recorded for a skipped step.
    pub fn skipped() -> Self {
        Self {
            was_skipped: true,
            ..Self::default()
        }
    }
}

pub fn compute_lift(record: &TokenRecord, cfg: &LiftConfig) -> Result<LiftIncrement, LiftError> {
    record.validate()?;
    if record.skeleton_prob == 0.0 {
        return Ok(LiftIncrement {
            was_zeroed: true,
            ..LiftIncrement::default()
        });
    }
    let raw = (record.full_prob / record.skeleton_prob).ln();
    let mut inc = LiftIncrement::default();
    if raw < 0.0 {
        inc.was_zeroed = true;
    } else if raw >= cfg.clip_bound {
        inc.value = cfg.clip_bound;
        inc.was_clipped_high = true;
    } else {
        inc.value = raw;
    }
    Ok(inc)
}

/// `H_{t-1} - H_{t-2}`: positive when uncertainty is rising.
pub fn entropy_slope(prev2_entropy: f64, prev1_entropy: f64) -> f64 {
    prev1_entropy - prev2_entropy
}
