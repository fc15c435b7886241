//! Synthetic token streams and Monte Carlo calibration.
//!
//! [`generate_stream`] draws lift increments from a chosen family, then
//! back-solves probability pairs `(p_t, s_t)` with `ln(p_t / s_t) = X_t`, so the
//! engine sees ordinary token records. [`monte_carlo_risk`] runs the engine
//! over many independent streams and reports the time-uniform empirical risk
//! curve `r_t`: the fraction of streams whose first threshold crossing happened
//! at or before step `t`.
//!
//! Stream `i` of a batch is seeded with `derive_seed(master, i)`, so results do
//! not depend on how many threads ran the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta as BetaDist, ContinuousCDF, Continuous, Normal};
use thiserror::Error;

use crate::config::{digest_of, ConfigError, EngineConfig};
use crate::controller::{ControlError, Engine};
use crate::eprocess::Centering;
use crate::lift::{TokenRecord, DEFAULT_CLIP_BOUND};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),

    #[error("need at least {min} streams, got {got}")]
    TooFewStreams { min: usize, got: usize },

    #[error("sensitivity grid is empty")]
    EmptyGrid,

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Engine(#[from] ControlError),
}

/// Smallest batch accepted by [`monte_carlo_risk`].
pub const MIN_STREAMS: usize = 100;

/// Shape of the increment distribution around the current mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum NoiseModel {
    /// `clamp(mean + σ Z, 0, B)`. Clipping shifts the realized mean; see
    /// [`StreamSpec::increment_mean`].
    ClippedGaussian { sigma: f64 },
    /// `scale · Beta(a, b)` with `scale = mean (a + b) / a`; the mean is exact.
    BetaScaled { a: f64, b: f64 },
    /// `hi` with probability `p_hi`, else `lo`; `hi` solved so the mean is exact.
    TwoPoint { p_hi: f64, lo: f64 },
}

/// Jump of the increment mean, effective from `step` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanShift {
    pub step: u64,
    pub mean: f64,
}

/// `H_t = max(0, base − coupling · (X_t − mean_t) + noise_sd · Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntropyModel {
    pub base: f64,
    pub coupling: f64,
    pub noise_sd: f64,
}

impl Default for EntropyModel {
    fn default() -> Self {
        Self {
            base: 2.0,
            coupling: 1.0,
            noise_sd: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StreamSpec {
    pub length: u64,
    pub base_mean: f64,
    pub noise: NoiseModel,
    pub drift: Vec<MeanShift>,
    pub entropy: EntropyModel,
    /// Every k-th step is a sentence boundary; 0 disables boundaries.
    pub boundary_every: u64,
    /// Probability that a step's verifier score passes `0.7`. `None` omits
    /// scores entirely.
    pub verifier_pass_rate: Option<f64>,
    pub clip_bound: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self::null(42)
    }
}

impl StreamSpec {
    /// Stationary i.i.d. increments on `[0, B]` with mean 0.3.
    pub fn null(seed: u64) -> Self {
        Self {
            length: 150,
            base_mean: 0.3,
            noise: NoiseModel::BetaScaled { a: 2.0, b: 5.0 },
            drift: Vec::new(),
            entropy: EntropyModel::default(),
            boundary_every: 5,
            verifier_pass_rate: Some(0.8),
            clip_bound: DEFAULT_CLIP_BOUND,
            seed,
        }
    }

    /// Low-lift stationary stream on which inflation visibly matters.
    pub fn near_null(seed: u64) -> Self {
        Self {
            base_mean: 0.15,
            noise: NoiseModel::ClippedGaussian { sigma: 0.2 },
            ..Self::null(seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let b = self.clip_bound;
        if !(b > 0.0 && b.is_finite()) {
            return Err(SimError::InvalidSpec(format!("clip_bound must be positive, got {b}")));
        }
        match self.noise {
            NoiseModel::ClippedGaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                return Err(SimError::InvalidSpec(format!("sigma must be nonnegative, got {sigma}")));
            }
            NoiseModel::BetaScaled { a, b: beta_b } if !(a > 0.0 && beta_b > 0.0) => {
                return Err(SimError::InvalidSpec(format!("beta shape must be positive, got ({a}, {beta_b})")));
            }
            NoiseModel::TwoPoint { p_hi, lo } if !(p_hi > 0.0 && p_hi <= 1.0 && lo >= 0.0) => {
                return Err(SimError::InvalidSpec(format!("two-point needs p_hi in (0, 1] and lo >= 0, got ({p_hi}, {lo})")));
            }
            _ => {}
        }
        let mut prev = 0;
        for shift in &self.drift {
            if shift.step <= prev {
                return Err(SimError::InvalidSpec("drift steps must be positive and increasing".into()));
            }
            prev = shift.step;
        }
        for mean in std::iter::once(self.base_mean).chain(self.drift.iter().map(|s| s.mean)) {
            self.support_max(mean)?;
        }
        let e = &self.entropy;
        if !(e.base.is_finite() && e.coupling.is_finite() && e.noise_sd >= 0.0) {
            return Err(SimError::InvalidSpec("entropy model parameters must be finite".into()));
        }
        if let Some(rate) = self.verifier_pass_rate {
            if !(0.0..=1.0).contains(&rate) {
                return Err(SimError::InvalidSpec(format!("verifier_pass_rate must lie in [0, 1], got {rate}")));
            }
        }
        Ok(())
    }

    /// Largest increment the family can produce at this mean. Fails when that
    /// exceeds the clip bound (the target could not be realized unclipped).
    fn support_max(&self, mean: f64) -> Result<f64, SimError> {
        let b = self.clip_bound;
        if !(mean >= 0.0 && mean <= b) {
            return Err(SimError::InvalidSpec(format!("mean {mean} outside [0, {b}]")));
        }
        let top = match self.noise {
            NoiseModel::ClippedGaussian { .. } => b,
            NoiseModel::BetaScaled { a, b: beta_b } => mean * (a + beta_b) / a,
            NoiseModel::TwoPoint { p_hi, lo } => {
                if mean < lo {
                    return Err(SimError::InvalidSpec(format!("mean {mean} below two-point lo {lo}")));
                }
                lo + (mean - lo) / p_hi
            }
        };
        if top > b {
            return Err(SimError::InvalidSpec(format!(
                "target increment {top} exceeds clip bound {b}"
            )));
        }
        Ok(top)
    }

    /// Mean of the increment in force at step `t`.
    pub fn mean_at(&self, t: u64) -> f64 {
        self.drift
            .iter()
            .take_while(|s| s.step <= t)
            .last()
            .map_or(self.base_mean, |s| s.mean)
    }

    /// Exact expectation of the generated increment when the family mean is
    /// `mean`. Differs from `mean` only for the clipped Gaussian.
    pub fn increment_mean(&self, mean: f64) -> f64 {
        match self.noise {
            NoiseModel::ClippedGaussian { sigma } if sigma > 0.0 => {
                clipped_normal_mean(mean, sigma, self.clip_bound)
            }
            NoiseModel::ClippedGaussian { .. } => mean.clamp(0.0, self.clip_bound),
            _ => mean,
        }
    }

    /// Exact increment mean before any drift.
    pub fn stationary_mean(&self) -> f64 {
        self.increment_mean(self.base_mean)
    }

    /// Copy of `cfg` centered on this spec's exact stationary mean.
    pub fn oracle_config(&self, cfg: &EngineConfig) -> EngineConfig {
        EngineConfig {
            centering: Centering::Fixed {
                mean: self.stationary_mean(),
            },
            ..cfg.clone()
        }
    }
}

/// `E[clamp(Y, 0, upper)]` for `Y ~ N(mean, sigma²)`.
fn clipped_normal_mean(mean: f64, sigma: f64, upper: f64) -> f64 {
    let std = Normal::standard();
    let a = -mean / sigma;
    let b = (upper - mean) / sigma;
    mean * (std.cdf(b) - std.cdf(a)) + sigma * (std.pdf(a) - std.pdf(b)) + upper * (1.0 - std.cdf(b))
}

/// Counter-based split of a master seed (SplitMix64 finalizer over
/// `master + (index + 1) · φ`).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws a stream of token records realizing the spec's increments.
pub fn generate_stream(spec: &StreamSpec) -> Result<Vec<TokenRecord>, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.length as usize);
    for t in 1..=spec.length {
        let mean = spec.mean_at(t);
        // Fixed draw order per step keeps streams comparable across options.
        let z: f64 = StandardNormal.sample(&mut rng);
        let u_family: f64 = rng.random();
        let u_p: f64 = rng.random();
        let z_h: f64 = StandardNormal.sample(&mut rng);
        let u_pass: f64 = rng.random();
        let u_score: f64 = rng.random();

        let x = match spec.noise {
            NoiseModel::ClippedGaussian { sigma } => (mean + sigma * z).clamp(0.0, spec.clip_bound),
            NoiseModel::BetaScaled { a, b } => {
                if mean == 0.0 {
                    0.0
                } else {
                    let scale = mean * (a + b) / a;
                    let beta = Beta::new(a, b).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
                    scale * beta.sample(&mut rng)
                }
            }
            NoiseModel::TwoPoint { p_hi, lo } => {
                if u_family < p_hi {
                    lo + (mean - lo) / p_hi
                } else {
                    lo
                }
            }
        };
        let full_prob = 0.3 + 0.7 * u_p;
        let skeleton_prob = if x == 0.0 { full_prob } else { full_prob * (-x).exp() };
        let e = &spec.entropy;
        let entropy = (e.base - e.coupling * (x - mean) + e.noise_sd * z_h).max(0.0);
        let mut record = TokenRecord::new(t, full_prob, skeleton_prob).with_entropy(entropy);
        record.is_boundary = spec.boundary_every > 0 && t % spec.boundary_every == 0;
        record.verifier_score = spec.verifier_pass_rate.map(|rate| {
            if u_pass < rate {
                0.7 + 0.3 * u_score
            } else {
                0.7 * u_score
            }
        });
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskPoint {
    pub t: u64,
    pub risk: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n_streams: usize,
    pub delta: f64,
    pub horizon: u64,
    pub curve: Vec<RiskPoint>,
    pub crossings: usize,
    pub final_rate: f64,
    pub final_ci: (f64, f64),
    /// Mean of stop step (or steps consumed, on timeout).
    pub mean_stop_step: f64,
    pub config_digest: String,
}

impl CalibrationReport {
    /// `sqrt(δ (1 − δ) / n)`.
    pub fn standard_error(&self) -> f64 {
        (self.delta * (1.0 - self.delta) / self.n_streams as f64).sqrt()
    }
}

/// Exact two-sided Clopper–Pearson interval at level `1 − alpha`.
pub fn clopper_pearson(successes: usize, trials: usize, alpha: f64) -> (f64, f64) {
    let k = successes as f64;
    let n = trials as f64;
    let lo = if successes == 0 {
        0.0
    } else {
        BetaDist::new(k, n - k + 1.0)
            .expect("positive shapes")
            .inverse_cdf(alpha / 2.0)
    };
    let hi = if successes >= trials {
        1.0
    } else {
        BetaDist::new(k + 1.0, n - k)
            .expect("positive shapes")
            .inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

struct StreamOutcome {
    crossing: Option<u64>,
    tokens_used: u64,
}

fn run_batch(spec: &StreamSpec, engine: &Engine, n_streams: usize) -> Result<Vec<StreamOutcome>, SimError> {
    (0..n_streams as u64)
        .into_par_iter()
        .map(|i| {
            let records = generate_stream(&spec.with_seed(derive_seed(spec.seed, i)))?;
            let cert = engine.run(records, false)?;
            Ok(StreamOutcome {
                crossing: cert.crossing_step,
                tokens_used: cert.tokens_used(),
            })
        })
        .collect()
}

/// Empirical first-crossing risk curve of `cfg` over `n_streams` streams drawn
/// from `spec` (stream seeds derived from `spec.seed`).
pub fn monte_carlo_risk(
    spec: &StreamSpec,
    cfg: &EngineConfig,
    n_streams: usize,
) -> Result<CalibrationReport, SimError> {
    if n_streams < MIN_STREAMS {
        return Err(SimError::TooFewStreams {
            min: MIN_STREAMS,
            got: n_streams,
        });
    }
    spec.validate()?;
    let engine = Engine::new(cfg.clone())?;
    let outcomes = run_batch(spec, &engine, n_streams)?;

    let horizon = spec.length.min(cfg.max_steps);
    let mut per_step = vec![0usize; horizon as usize + 1];
    for o in &outcomes {
        if let Some(t) = o.crossing {
            per_step[t as usize] += 1;
        }
    }
    let mut cumulative = 0usize;
    let mut curve = Vec::with_capacity(horizon as usize);
    let mut last_ci = (0.0, 0.0);
    let mut last_count = usize::MAX;
    for t in 1..=horizon {
        cumulative += per_step[t as usize];
        if cumulative != last_count {
            last_ci = clopper_pearson(cumulative, n_streams, 0.05);
            last_count = cumulative;
        }
        curve.push(RiskPoint {
            t,
            risk: cumulative as f64 / n_streams as f64,
            ci_lo: last_ci.0,
            ci_hi: last_ci.1,
        });
    }
    let final_ci = clopper_pearson(cumulative, n_streams, 0.05);
    let mean_stop_step = outcomes.iter().map(|o| o.tokens_used as f64).sum::<f64>() / n_streams as f64;
    Ok(CalibrationReport {
        n_streams,
        delta: cfg.delta,
        horizon,
        curve,
        crossings: cumulative,
        final_rate: cumulative as f64 / n_streams as f64,
        final_ci,
        mean_stop_step,
        config_digest: digest_of(&(cfg, spec, n_streams)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub v_factor: f64,
    pub eta_factor: f64,
    pub risk: f64,
    pub mean_stop: f64,
}

/// Inflation factor pairs: none, mild, default, very conservative.
pub const DEFAULT_INFLATION_GRID: [(f64, f64); 4] = [(1.0, 1.0), (1.2, 1.3), (1.3, 1.5), (1.5, 2.0)];

/// Engine settings for inflation sweeps.
///
/// Strictly predictable EMA centering with no additive slack and a grid
/// reaching towards `1/c`. The EMA variance is taken around an estimate that
/// already absorbed part of each deviation, so uninflated it under-reads the
/// true spread by roughly `(1 - alpha)^2`; the inflation factors are then
/// what separates valid from anti-conservative behaviour.
pub fn sweep_engine_config() -> EngineConfig {
    let mut cfg = EngineConfig {
        strict_predictable: true,
        ..EngineConfig::default()
    };
    cfg.estimator.eta = 0.0;
    cfg.grid.lambda_max = 5.0;
    cfg.skip.enabled = false;
    cfg.drift.enabled = false;
    cfg
}

/// One Monte Carlo run per `(v_factor, eta_factor)` cell, same streams each.
pub fn sensitivity_sweep(
    spec: &StreamSpec,
    cfg: &EngineConfig,
    grid: &[(f64, f64)],
    n_streams: usize,
) -> Result<Vec<SweepRow>, SimError> {
    if grid.is_empty() {
        return Err(SimError::EmptyGrid);
    }
    grid.iter()
        .map(|&(v_factor, eta_factor)| {
            let mut cell = cfg.clone();
            cell.estimator.v_factor = v_factor;
            cell.estimator.eta_factor = eta_factor;
            let report = monte_carlo_risk(spec, &cell, n_streams)?;
            Ok(SweepRow {
                v_factor,
                eta_factor,
                risk: report.final_rate,
                mean_stop: report.mean_stop_step,
            })
        })
        .collect()
}
