//! Per-stream stopping controller.
//!
//! Each step runs, in order: the entropy-slope skip check, the lift, the
//! estimate and e-process updates, the mixture, the threshold test against
//! `u_J`, the optional gate, and drift detection with segment resets.
//!
//! Segment `J` gets budget `δ_J = 6δ / (π² J²)` and threshold `u_J = 1/δ_J`;
//! the budgets sum to `δ`. All threshold comparisons happen in log space.
//!
//! A threshold crossing latches a stop intent. With the gate enabled the
//! stop is postponed until a step is both a sentence boundary and carries a
//! verifier score of at least `τ_c`; the gate never moves a stop earlier.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, EngineConfig, GateConfig, SkipMode};
use crate::eprocess::{EProcessError, EProcessState, EstimatorState, LambdaGrid};
use crate::lift::{compute_lift, entropy_slope, LiftError, LiftIncrement, TokenRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Lift(#[from] LiftError),

    #[error(transparent)]
    EProcess(#[from] EProcessError),

    #[error("record index {got} does not follow previous index {previous}")]
    Sequencing { previous: u64, got: u64 },

    #[error("step {step} submitted after the stream finished")]
    Lifecycle { step: u64 },

    #[error("malformed record at step {step}: gate enabled but `verifier_score` is missing")]
    MissingVerifier { step: u64 },
}

/// `(δ_J, u_J)` for segment `J >= 1`.
pub fn segment_budget(delta_total: f64, segment: u32) -> (f64, f64) {
    let j = f64::from(segment);
    let delta_j = 6.0 * delta_total / (PI * PI * j * j);
    (delta_j, 1.0 / delta_j)
}

pub fn should_skip(slope: f64, threshold: f64) -> bool {
    slope >= threshold
}

pub fn drift_exceeds(mu_recent: f64, mu_overall: f64, tau_d: f64) -> bool {
    (mu_recent - mu_overall).abs() > tau_d
}

/// `IsSentenceBoundary && VerifierPass >= τ_c`.
pub fn gate_check(record: &TokenRecord, gate: &GateConfig) -> Result<bool, ControlError> {
    let score = record
        .verifier_score
        .ok_or(ControlError::MissingVerifier { step: record.index })?;
    Ok(record.is_boundary && score >= gate.tau_c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub delta_total: f64,
    pub segment: u32,
    pub delta_j: f64,
    pub u_j: f64,
    pub reset_times: Vec<u64>,
}

impl BudgetSchedule {
    pub fn new(delta_total: f64) -> Self {
        let (delta_j, u_j) = segment_budget(delta_total, 1);
        Self {
            delta_total,
            segment: 1,
            delta_j,
            u_j,
            reset_times: Vec::new(),
        }
    }

    /// Moves to the next segment, recording the step at which it happened.
    pub fn advance(&mut self, at_step: u64) {
        self.segment += 1;
        let (delta_j, u_j) = segment_budget(self.delta_total, self.segment);
        self.delta_j = delta_j;
        self.u_j = u_j;
        self.reset_times.push(at_step);
    }

    pub fn log_threshold(&self) -> f64 {
        -self.delta_j.ln()
    }
}

/// Recent-versus-overall mean of accepted increments within a segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftDetector {
    pub window: usize,
    pub tau_d: f64,
    recent: VecDeque<f64>,
    overall_sum: f64,
    overall_count: u64,
}

impl DriftDetector {
    pub fn new(window: usize, tau_d: f64) -> Self {
        Self {
            window,
            tau_d,
            recent: VecDeque::with_capacity(window),
            overall_sum: 0.0,
            overall_count: 0,
        }
    }

    pub fn push(&mut self, x: f64) {
        if self.recent.len() == self.window {
            self.recent.pop_front();
        }
        self.recent.push_back(x);
        self.overall_sum += x;
        self.overall_count += 1;
    }

    pub fn is_ready(&self) -> bool {
        self.overall_count >= self.window as u64
    }

    pub fn mu_recent(&self) -> f64 {
        if self.recent.is_empty() {
            return 0.0;
        }
        self.recent.iter().sum::<f64>() / self.recent.len() as f64
    }

    pub fn mu_overall(&self) -> f64 {
        if self.overall_count == 0 {
            return 0.0;
        }
        self.overall_sum / self.overall_count as f64
    }

    /// Inert until a full window has been observed.
    pub fn detect(&self) -> bool {
        self.is_ready() && drift_exceeds(self.mu_recent(), self.mu_overall(), self.tau_d)
    }

    pub fn clear(&mut self) {
        self.recent.clear();
        self.overall_sum = 0.0;
        self.overall_count = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    Continue,
    Skipped,
    GateDelayed,
    Stopped,
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepVerdict {
    pub kind: VerdictKind,
    pub step: u64,
    /// `log M_t` after this step's update, before any reset.
    pub log_mixture: f64,
    /// Segment in force after this step.
    pub segment: u32,
}

/// One line of the audit trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub t: u64,
    pub verdict: VerdictKind,
    pub lift: f64,
    pub log_mixture: f64,
    pub mu_hat: f64,
    pub v_hat: f64,
    pub segment: u32,
    pub cumulative_lift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Stopped,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeoutReason {
    StreamExhausted,
    MaxSteps,
    SegmentCap,
}

/// Terminal record of a stream run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeout_reason: Option<TimeoutReason>,
    pub delta_total: f64,
    pub stop_step: Option<u64>,
    pub steps_processed: u64,
    /// First step at which `log M_t >= ln u_J`.
    pub crossing_step: Option<u64>,
    /// `stop_step - crossing_step`, when stopped.
    pub gate_delay_tokens: Option<u64>,
    pub segments_used: u32,
    pub reset_times: Vec<u64>,
    pub final_log_mixture: f64,
    pub final_log_threshold: f64,
    /// Sum of accepted (non-skipped) increments.
    pub cumulative_lift: f64,
    pub config_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TraceEntry>>,
}

impl Certificate {
    /// Stop step for stopped runs, otherwise the number of steps consumed.
    pub fn tokens_used(&self) -> u64 {
        self.stop_step.unwrap_or(self.steps_processed)
    }
}

/// A validated configuration ready to drive any number of streams.
#[derive(Debug, Clone)]
pub struct Engine {
    cfg: EngineConfig,
    grid: LambdaGrid,
    digest: String,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let grid = cfg.lambda_grid()?;
        let digest = cfg.digest();
        Ok(Self { cfg, grid, digest })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &LambdaGrid {
        &self.grid
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn start(&self) -> Controller<'_> {
        Controller::new(self, false)
    }

    pub fn start_traced(&self) -> Controller<'_> {
        Controller::new(self, true)
    }

    /// Folds a finite stream through a fresh controller.
    pub fn run<I>(&self, records: I, trace: bool) -> Result<Certificate, ControlError>
    where
        I: IntoIterator<Item = TokenRecord>,
    {
        self.try_run(records.into_iter().map(Ok::<_, ControlError>), trace)
    }

    /// Like [`Engine::run`] for fallible sources such as a parser.
    pub fn try_run<I, E>(&self, records: I, trace: bool) -> Result<Certificate, E>
    where
        I: IntoIterator<Item = Result<TokenRecord, E>>,
        E: From<ControlError>,
    {
        let mut ctl = Controller::new(self, trace);
        for record in records {
            if ctl.is_finished() {
                ctl.mark_truncated();
                break;
            }
            ctl.step(&record?)?;
        }
        Ok(ctl.finish())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Running,
    Stopped(u64),
    Timeout(TimeoutReason),
}

/// State machine for a single stream.
#[derive(Debug, Clone)]
pub struct Controller<'a> {
    engine: &'a Engine,
    eprocess: EProcessState,
    budget: BudgetSchedule,
    drift: DriftDetector,
    status: Status,
    last_index: Option<u64>,
    entropy_prev2: Option<f64>,
    entropy_prev1: Option<f64>,
    crossing_step: Option<u64>,
    steps: u64,
    steps_in_segment: u64,
    cumulative_lift: f64,
    last_log_mixture: f64,
    trace: Option<Vec<TraceEntry>>,
}

impl<'a> Controller<'a> {
    fn new(engine: &'a Engine, traced: bool) -> Self {
        let cfg = &engine.cfg;
        Self {
            engine,
            eprocess: EProcessState::new(
                &engine.grid,
                cfg.penalty,
                EstimatorState::new(&cfg.estimator),
                cfg.lift.increment_bound,
                cfg.lift.clip_bound,
            ),
            budget: BudgetSchedule::new(cfg.delta),
            drift: DriftDetector::new(cfg.drift.window, cfg.drift.tau_d),
            status: Status::Running,
            last_index: None,
            entropy_prev2: None,
            entropy_prev1: None,
            crossing_step: None,
            steps: 0,
            steps_in_segment: 0,
            cumulative_lift: 0.0,
            last_log_mixture: 0.0,
            trace: traced.then(Vec::new),
        }
    }

    pub fn eprocess(&self) -> &EProcessState {
        &self.eprocess
    }

    pub fn budget(&self) -> &BudgetSchedule {
        &self.budget
    }

    pub fn drift_detector(&self) -> &DriftDetector {
        &self.drift
    }

    pub fn crossing_step(&self) -> Option<u64> {
        self.crossing_step
    }

    pub fn is_finished(&self) -> bool {
        self.status != Status::Running
    }

    fn mark_truncated(&mut self) {
        if self.status == Status::Running {
            self.status = Status::Timeout(TimeoutReason::MaxSteps);
        }
    }

    pub fn step(&mut self, record: &TokenRecord) -> Result<StepVerdict, ControlError> {
        if self.is_finished() {
            return Err(ControlError::Lifecycle { step: record.index });
        }
        if let Some(previous) = self.last_index {
            if record.index <= previous {
                return Err(ControlError::Sequencing {
                    previous,
                    got: record.index,
                });
            }
        }
        let cfg = &self.engine.cfg;
        let mut increment = compute_lift(record, &cfg.lift)?;
        if cfg.gate.enabled && record.verifier_score.is_none() {
            return Err(ControlError::MissingVerifier { step: record.index });
        }

        let slope = match (self.entropy_prev2, self.entropy_prev1) {
            (Some(h2), Some(h1)) => Some(entropy_slope(h2, h1)),
            _ => None,
        };
        let skip = cfg.skip.enabled && slope.is_some_and(|s| should_skip(s, cfg.skip.threshold));
        if skip {
            increment = LiftIncrement::skipped();
        }

        let step = record.index;
        let kind = if skip && cfg.skip.mode == SkipMode::Bypass {
            self.advance_bookkeeping(record);
            VerdictKind::Skipped
        } else {
            self.eprocess
                .observe(increment.value, cfg.centering, cfg.strict_predictable)?;
            self.last_log_mixture = self.eprocess.mixture_log_value();
            if !skip {
                self.cumulative_lift += increment.value;
            }
            self.advance_bookkeeping(record);

            if self.crossing_step.is_none() && self.last_log_mixture >= self.budget.log_threshold() {
                self.crossing_step = Some(step);
            }
            if self.crossing_step.is_some() {
                if !cfg.gate.enabled || gate_check(record, &cfg.gate)? {
                    self.status = Status::Stopped(step);
                    VerdictKind::Stopped
                } else {
                    VerdictKind::GateDelayed
                }
            } else {
                if !skip {
                    self.drift.push(increment.value);
                }
                if skip {
                    VerdictKind::Skipped
                } else {
                    VerdictKind::Continue
                }
            }
        };

        let kind = match kind {
            VerdictKind::Continue | VerdictKind::Skipped
                if self.crossing_step.is_none() && self.reset_due() => self.reset(step),
            other => other,
        };
        if kind != VerdictKind::Stopped && self.status == Status::Running && self.steps >= cfg.max_steps {
            self.status = Status::Timeout(TimeoutReason::MaxSteps);
        }

        let verdict = StepVerdict {
            kind,
            step,
            log_mixture: self.last_log_mixture,
            segment: self.budget.segment,
        };
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceEntry {
                t: step,
                verdict: kind,
                lift: increment.value,
                log_mixture: self.last_log_mixture,
                mu_hat: self.eprocess.estimator.mu_hat,
                v_hat: self.eprocess.estimator.v_hat(),
                segment: self.budget.segment,
                cumulative_lift: self.cumulative_lift,
            });
        }
        if kind == VerdictKind::Reset {
            self.last_log_mixture = 0.0;
        }
        Ok(verdict)
    }

    fn advance_bookkeeping(&mut self, record: &TokenRecord) {
        self.last_index = Some(record.index);
        self.entropy_prev2 = self.entropy_prev1;
        self.entropy_prev1 = record.entropy;
        self.steps += 1;
        self.steps_in_segment += 1;
    }

    fn reset_due(&self) -> bool {
        let drift = &self.engine.cfg.drift;
        let forced = drift
            .forced_period
            .is_some_and(|period| self.steps_in_segment >= period);
        forced || (drift.enabled && self.drift.detect())
    }

    fn reset(&mut self, step: u64) -> VerdictKind {
        if self.budget.segment >= self.engine.cfg.drift.max_segments {
            self.status = Status::Timeout(TimeoutReason::SegmentCap);
            return VerdictKind::Continue;
        }
        self.budget.advance(step);
        self.eprocess.reset();
        self.drift.clear();
        self.steps_in_segment = 0;
        VerdictKind::Reset
    }

    /// Closes the stream and emits its certificate.
    pub fn finish(self) -> Certificate {
        let (outcome, stop_step, timeout_reason) = match self.status {
            Status::Stopped(step) => (Outcome::Stopped, Some(step), None),
            Status::Timeout(reason) => (Outcome::Timeout, None, Some(reason)),
            Status::Running => (Outcome::Timeout, None, Some(TimeoutReason::StreamExhausted)),
        };
        let gate_delay_tokens = match (stop_step, self.crossing_step) {
            (Some(stop), Some(cross)) => Some(stop - cross),
            _ => None,
        };
        Certificate {
            outcome,
            timeout_reason,
            delta_total: self.budget.delta_total,
            stop_step,
            steps_processed: self.steps,
            crossing_step: self.crossing_step,
            gate_delay_tokens,
            segments_used: self.budget.reset_times.len() as u32 + 1,
            final_log_mixture: self.eprocess.mixture_log_value(),
            final_log_threshold: self.budget.log_threshold(),
            reset_times: self.budget.reset_times,
            cumulative_lift: self.cumulative_lift,
            config_digest: self.engine.digest.clone(),
            trace: self.trace,
        }
    }
}
