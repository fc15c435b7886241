//! Skeleton constructors and the skeleton acceptance checklist.
//!
//! A skeleton is a deliberately weakened version of the full model. Two
//! logit-level constructions are provided: temperature scaling
//! (`softmax(ℓ / τ)`) and flattening toward uniform
//! (`(1 − γ) P + γ / V`). [`diagnose`] checks a paired stream against the
//! acceptance rule: mean `KL(P‖S)` within `[2, 10]` nats, lift negatively
//! correlated with entropy (`ρ < −0.5`), and fewer than 5% of tokens
//! saturating the clip bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lift::{compute_lift, LiftConfig, LiftError, TokenRecord};

/// Tolerance on `Σ p_i = 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SkeletonError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("logits must be finite (index {index} is {value})")]
    NonFiniteLogits { index: usize, value: f64 },

    #[error("temperature must be at least 1, got {0}")]
    InvalidTemperature(f64),

    #[error("mixing rate must lie in [0, 1], got {0}")]
    InvalidMixing(f64),

    #[error("vocabulary mismatch: {left} vs {right} entries")]
    VocabularyMismatch { left: usize, right: usize },

    #[error("step {step}: chosen token {chosen} outside vocabulary of {vocab}")]
    ChosenOutOfRange { step: usize, chosen: usize, vocab: usize },

    #[error("step {step}: {source}")]
    Lift { step: usize, source: LiftError },
}

/// A probability distribution over a finite vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self, SkeletonError> {
        if probs.is_empty() {
            return Err(SkeletonError::InvalidDistribution("empty vocabulary".into()));
        }
        if let Some((i, p)) = probs.iter().enumerate().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(SkeletonError::InvalidDistribution(format!("entry {i} is {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(SkeletonError::InvalidDistribution(format!("entries sum to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(vocab: usize) -> Result<Self, SkeletonError> {
        Self::new(vec![1.0 / vocab as f64; vocab])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = SkeletonError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SkeletonSpec {
    Temperature { tau: f64 },
    Flatten { gamma: f64 },
}

impl SkeletonSpec {
    /// Builds the skeleton distribution from full-model logits.
    pub fn apply(&self, logits: &[f64]) -> Result<ProbVector, SkeletonError> {
        match *self {
            SkeletonSpec::Temperature { tau } => apply_temperature(logits, tau),
            SkeletonSpec::Flatten { gamma } => apply_flatten(&apply_temperature(logits, 1.0)?, gamma),
        }
    }
}

/// `softmax(logits / τ)` with max subtraction.
pub fn apply_temperature(logits: &[f64], tau: f64) -> Result<ProbVector, SkeletonError> {
    if !(tau >= 1.0 && tau.is_finite()) {
        return Err(SkeletonError::InvalidTemperature(tau));
    }
    if let Some((index, &value)) = logits.iter().enumerate().find(|(_, l)| !l.is_finite()) {
        return Err(SkeletonError::NonFiniteLogits { index, value });
    }
    if logits.is_empty() {
        return Err(SkeletonError::InvalidDistribution("empty vocabulary".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l - max) / tau).exp()).collect();
    let total: f64 = weights.iter().sum();
    ProbVector::new(weights.into_iter().map(|w| w / total).collect())
}

/// `(1 − γ) P + γ · Uniform`.
pub fn apply_flatten(p: &ProbVector, gamma: f64) -> Result<ProbVector, SkeletonError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(SkeletonError::InvalidMixing(gamma));
    }
    let floor = gamma / p.len() as f64;
    ProbVector::new(p.probs().iter().map(|pi| (1.0 - gamma) * pi + floor).collect())
}

/// `Σ p_i ln(p_i / q_i)`; `+∞` when `q` misses part of `p`'s support.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64, SkeletonError> {
    if p.len() != q.len() {
        return Err(SkeletonError::VocabularyMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi / qi).ln();
    }
    // Rounding can leave a tiny negative residue for near-identical inputs.
    Ok(total.max(0.0))
}

/// One step of a paired full/skeleton distribution stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistStep {
    pub full: ProbVector,
    pub skeleton: ProbVector,
    /// Index of the emitted token.
    pub chosen: usize,
    /// Full-model entropy; computed from `full` when absent.
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationMethod {
    #[default]
    Pearson,
    Spearman,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiagnoseOptions {
    pub correlation: CorrelationMethod,
    pub min_steps: usize,
    pub kl_min: f64,
    pub kl_max: f64,
    /// Accept only when `ρ` is strictly below this.
    pub rho_max: f64,
    /// Accept only when the saturation rate is strictly below this.
    pub saturation_max: f64,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            correlation: CorrelationMethod::Pearson,
            min_steps: 30,
            kl_min: 2.0,
            kl_max: 10.0,
            rho_max: -0.5,
            saturation_max: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectionReason {
    InsufficientData,
    /// KL too small: make the skeleton weaker than the full model (e.g. raise τ).
    StrengthenSkeleton,
    /// KL too large: bring the skeleton closer to the full model (e.g. lower τ).
    WeakenSkeleton,
    /// Lift does not track entropy; try a different skeleton family.
    SwitchFamilies,
    RhoUndefined,
    ExcessSaturation,
}

impl RejectionReason {
    pub fn hint(&self) -> &'static str {
        match self {
            Self::InsufficientData => "collect at least the minimum number of paired steps",
            Self::StrengthenSkeleton => "strengthen S (e.g. higher temperature)",
            Self::WeakenSkeleton => "weaken S (e.g. lower temperature)",
            Self::SwitchFamilies => "switch skeleton families",
            Self::RhoUndefined => "lift or entropy has zero variance; correlation undefined",
            Self::ExcessSaturation => "too many increments hit the clip bound; raise B or weaken S",
        }
    }
}

/// Summary statistics the acceptance rule looks at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkeletonStats {
    pub n_steps: usize,
    pub kl_p_s: f64,
    pub kl_s_p: f64,
    pub rho: Option<f64>,
    pub saturation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub n_steps: usize,
    pub kl_p_s: f64,
    pub kl_s_p: f64,
    pub rho: Option<f64>,
    pub correlation: CorrelationMethod,
    pub saturation_rate: f64,
    pub accepted: bool,
    pub rejection_reasons: Vec<RejectionReason>,
}

/// Applies the acceptance rule to precomputed statistics.
pub fn assess(stats: &SkeletonStats, opts: &DiagnoseOptions) -> DiagnosticsReport {
    let mut reasons = Vec::new();
    if stats.n_steps < opts.min_steps {
        reasons.push(RejectionReason::InsufficientData);
    }
    if stats.kl_p_s < opts.kl_min {
        reasons.push(RejectionReason::StrengthenSkeleton);
    } else if !(stats.kl_p_s <= opts.kl_max) {
        reasons.push(RejectionReason::WeakenSkeleton);
    }
    match stats.rho {
        None => reasons.push(RejectionReason::RhoUndefined),
        Some(rho) if !(rho < opts.rho_max) => reasons.push(RejectionReason::SwitchFamilies),
        Some(_) => {}
    }
    if !(stats.saturation_rate < opts.saturation_max) {
        reasons.push(RejectionReason::ExcessSaturation);
    }
    DiagnosticsReport {
        n_steps: stats.n_steps,
        kl_p_s: stats.kl_p_s,
        kl_s_p: stats.kl_s_p,
        rho: stats.rho,
        correlation: opts.correlation,
        saturation_rate: stats.saturation_rate,
        accepted: reasons.is_empty(),
        rejection_reasons: reasons,
    }
}

/// Computes the checklist statistics over a paired stream and applies the
/// acceptance rule.
pub fn diagnose(
    steps: &[DistStep],
    cfg: &LiftConfig,
    opts: &DiagnoseOptions,
) -> Result<DiagnosticsReport, SkeletonError> {
    let n = steps.len();
    let mut kl_ps = 0.0;
    let mut kl_sp = 0.0;
    let mut saturated = 0usize;
    let mut lifts = Vec::with_capacity(n);
    let mut entropies = Vec::with_capacity(n);
    for (i, step) in steps.iter().enumerate() {
        let vocab = step.full.len();
        if step.skeleton.len() != vocab {
            return Err(SkeletonError::VocabularyMismatch {
                left: vocab,
                right: step.skeleton.len(),
            });
        }
        if step.chosen >= vocab {
            return Err(SkeletonError::ChosenOutOfRange {
                step: i + 1,
                chosen: step.chosen,
                vocab,
            });
        }
        kl_ps += kl_divergence(&step.full, &step.skeleton)?;
        kl_sp += kl_divergence(&step.skeleton, &step.full)?;
        let record = TokenRecord::new(
            i as u64 + 1,
            step.full.probs()[step.chosen],
            step.skeleton.probs()[step.chosen],
        );
        let x = compute_lift(&record, cfg).map_err(|source| SkeletonError::Lift { step: i + 1, source })?;
        if x.was_clipped_high {
            saturated += 1;
        }
        lifts.push(x.value);
        entropies.push(step.entropy.unwrap_or_else(|| step.full.entropy()));
    }
    let denom = n.max(1) as f64;
    let rho = match opts.correlation {
        CorrelationMethod::Pearson => pearson(&lifts, &entropies),
        CorrelationMethod::Spearman => spearman(&lifts, &entropies),
    };
    let stats = SkeletonStats {
        n_steps: n,
        kl_p_s: if n == 0 { 0.0 } else { kl_ps / denom },
        kl_s_p: if n == 0 { 0.0 } else { kl_sp / denom },
        rho,
        saturation_rate: saturated as f64 / denom,
    };
    Ok(assess(&stats, opts))
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 || is_constant(&xs[..n]) || is_constant(&ys[..n]) {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs[..n].iter().zip(&ys[..n]) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn is_constant(values: &[f64]) -> bool {
    values.iter().all(|v| *v == values[0])
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&ranks(xs), &ranks(ys))
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}
