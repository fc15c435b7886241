//! Empirical-Bernstein e-processes over a grid of bet sizes.
//!
//! For each grid value `λ_k` the process keeps
//!
//! ```text
//! log M_t(λ_k) = Σ_s [ λ_k (X_s − μ̂_s) − ψ(λ_k, v̂_s) ]
//! ```
//!
//! where `μ̂`, `v̂` are exponentially weighted running estimates with
//! conservative inflation. The mixture `M_t = (1/K) Σ_k M_t(λ_k)` is itself an
//! e-process. Everything is kept in log space; the products overflow quickly
//! for long streams with large `λ`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EProcessError {
    #[error("grid upper value {lambda_max} must be below 1/c = {ceiling}")]
    GridBound { lambda_max: f64, ceiling: f64 },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid estimator config: {0}")]
    InvalidEstimator(String),

    #[error("non-finite log e-value {value} for lambda {lambda}")]
    NonFinite { lambda: f64, value: f64 },
}

/// Strictly increasing bet sizes `λ_1 < … < λ_K`, all in `(0, 1/c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    values: Vec<f64>,
}

impl LambdaGrid {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Geometrically spaced grid from `lambda_min` to `lambda_max` inclusive.
pub fn build_grid(
    k: usize,
    lambda_min: f64,
    lambda_max: f64,
    increment_bound: f64,
) -> Result<LambdaGrid, EProcessError> {
    if k == 0 {
        return Err(EProcessError::InvalidGrid("grid size must be at least 1".into()));
    }
    if !(lambda_min > 0.0 && lambda_min.is_finite()) {
        return Err(EProcessError::InvalidGrid(format!(
            "lambda_min must be positive, got {lambda_min}"
        )));
    }
    if !(lambda_max >= lambda_min) {
        return Err(EProcessError::InvalidGrid(format!(
            "lambda_max {lambda_max} is below lambda_min {lambda_min}"
        )));
    }
    let ceiling = 1.0 / increment_bound;
    if !(lambda_max < ceiling) {
        return Err(EProcessError::GridBound { lambda_max, ceiling });
    }
    if k == 1 {
        return Ok(LambdaGrid { values: vec![lambda_min] });
    }
    if lambda_max == lambda_min {
        return Err(EProcessError::InvalidGrid(format!(
            "{k} grid points need lambda_min < lambda_max"
        )));
    }
    let log_ratio = (lambda_max / lambda_min).ln() / (k - 1) as f64;
    let mut values: Vec<f64> = (0..k)
        .map(|i| lambda_min * (log_ratio * i as f64).exp())
        .collect();
    values[0] = lambda_min;
    values[k - 1] = lambda_max;
    Ok(LambdaGrid { values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// EMA rate, in `(0, 1)`.
    pub alpha: f64,
    /// Additive variance slack `η`, nats².
    pub eta: f64,
    /// Multiplicative inflation of the EMA variance, `≥ 1`.
    pub v_factor: f64,
    /// Multiplicative inflation of the slack, `≥ 1`.
    pub eta_factor: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            eta: 0.20,
            v_factor: 1.3,
            eta_factor: 1.5,
        }
    }
}

impl EstimatorConfig {
    /// No inflation at all: factors of one.
    pub fn uninflated(alpha: f64, eta: f64) -> Self {
        Self {
            alpha,
            eta,
            v_factor: 1.0,
            eta_factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), EProcessError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(EProcessError::InvalidEstimator(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(EProcessError::InvalidEstimator(format!(
                "eta must be nonnegative, got {}",
                self.eta
            )));
        }
        if !(self.v_factor >= 1.0 && self.v_factor.is_finite()) {
            return Err(EProcessError::InvalidEstimator(format!(
                "v_factor must be at least 1, got {}",
                self.v_factor
            )));
        }
        if !(self.eta_factor >= 1.0 && self.eta_factor.is_finite()) {
            return Err(EProcessError::InvalidEstimator(format!(
                "eta_factor must be at least 1, got {}",
                self.eta_factor
            )));
        }
        Ok(())
    }
}

/// Running mean and variance estimates.
///
/// `v_ema` is the plain exponentially weighted variance. The variance used in
/// penalties is `v_hat() = v_factor * v_ema + eta_factor * eta`; the inflation
/// is applied on read so that it does not compound through the recursion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub mu_hat: f64,
    pub v_ema: f64,
    pub alpha: f64,
    pub eta: f64,
    pub v_factor: f64,
    pub eta_factor: f64,
    pub count: u64,
}

impl EstimatorState {
    pub fn new(cfg: &EstimatorConfig) -> Self {
        Self {
            mu_hat: 0.0,
            v_ema: 0.0,
            alpha: cfg.alpha,
            eta: cfg.eta,
            v_factor: cfg.v_factor,
            eta_factor: cfg.eta_factor,
            count: 0,
        }
    }

    /// Inflated variance estimate fed to the penalty.
    pub fn v_hat(&self) -> f64 {
        self.v_factor * self.v_ema + self.eta_factor * self.eta
    }

    /// One EMA step. The variance uses the already-updated mean.
    pub fn update(&mut self, x: f64) {
        let a = self.alpha;
        self.mu_hat = (1.0 - a) * self.mu_hat + a * x;
        let dev = x - self.mu_hat;
        self.v_ema = (1.0 - a) * self.v_ema + a * dev * dev;
        self.count += 1;
    }
}

/// Penalty `ψ(λ)` subtracted from each log increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// `λ² v̂ / 2`.
    #[default]
    Gaussian,
    /// `λ² v̂ / (2 (1 − c λ))`, the sub-exponential form.
    Bernstein,
    /// `λ² B² / 8`, valid for any increments in `[0, B]` given exact centering.
    Hoeffding,
}

/// What the increments are centered on.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Centering {
    /// Running EMA mean.
    #[default]
    Ema,
    /// A known mean. Used for oracle-validity experiments.
    Fixed { mean: f64 },
}

/// Per-lambda log e-values plus the estimator that feeds them.
///
/// Field order is stable and is the serialized snapshot layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EProcessState {
    pub lambdas: Vec<f64>,
    pub log_m_per_lambda: Vec<f64>,
    pub penalty_kind: PenaltyKind,
    pub increment_bound: f64,
    pub clip_bound: f64,
    pub estimator: EstimatorState,
}

impl EProcessState {
    pub fn new(
        grid: &LambdaGrid,
        penalty_kind: PenaltyKind,
        estimator: EstimatorState,
        increment_bound: f64,
        clip_bound: f64,
    ) -> Self {
        Self {
            lambdas: grid.values().to_vec(),
            log_m_per_lambda: vec![0.0; grid.len()],
            penalty_kind,
            increment_bound,
            clip_bound,
            estimator,
        }
    }

    pub fn grid_size(&self) -> usize {
        self.lambdas.len()
    }

    pub fn penalty(&self, lambda: f64, variance: f64) -> f64 {
        let sq = lambda * lambda;
        match self.penalty_kind {
            PenaltyKind::Gaussian => sq * variance / 2.0,
            PenaltyKind::Bernstein => sq * variance / (2.0 * (1.0 - self.increment_bound * lambda)),
            PenaltyKind::Hoeffding => sq * self.clip_bound * self.clip_bound / 8.0,
        }
    }

    /// Multiplies every component by `exp(λ (x − center) − ψ(λ, variance))`.
    pub fn apply_increment(&mut self, x: f64, center: f64, variance: f64) -> Result<(), EProcessError> {
        for i in 0..self.lambdas.len() {
            let lambda = self.lambdas[i];
            let next = self.log_m_per_lambda[i] + lambda * (x - center) - self.penalty(lambda, variance);
            if !next.is_finite() {
                return Err(EProcessError::NonFinite { lambda, value: next });
            }
            self.log_m_per_lambda[i] = next;
        }
        Ok(())
    }

    /// Feeds one increment through estimator and e-process.
    ///
    /// By default the estimates are updated first and the just-updated values
    /// center the increment. With `strict_predictable` the previous estimates
    /// are used and the estimator is updated afterwards.
    pub fn observe(&mut self, x: f64, centering: Centering, strict_predictable: bool) -> Result<(), EProcessError> {
        if strict_predictable {
            let (center, variance) = self.center_and_variance(centering);
            self.apply_increment(x, center, variance)?;
            self.estimator.update(x);
        } else {
            self.estimator.update(x);
            let (center, variance) = self.center_and_variance(centering);
            self.apply_increment(x, center, variance)?;
        }
        Ok(())
    }

    fn center_and_variance(&self, centering: Centering) -> (f64, f64) {
        let center = match centering {
            Centering::Ema => self.estimator.mu_hat,
            Centering::Fixed { mean } => mean,
        };
        (center, self.estimator.v_hat())
    }

    /// Restarts every component at `M = 1`. Estimates are kept.
    pub fn reset(&mut self) {
        self.log_m_per_lambda.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn mixture_log_value(&self) -> f64 {
        log_mean_exp(&self.log_m_per_lambda)
    }

    pub fn max_log_value(&self) -> f64 {
        self.log_m_per_lambda
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `ln((1/K) Σ exp(v_k))` with max-shift stabilization.
pub fn log_mean_exp(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NEG_INFINITY;
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln() - (values.len() as f64).ln()
}
