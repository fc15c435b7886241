//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use liftstop::config::SkipMode;
use liftstop::eprocess::{Centering, PenaltyKind};
use liftstop::simlab::{MeanShift, NoiseModel, StreamSpec};
use liftstop::skeleton::{CorrelationMethod, DiagnoseOptions};
use liftstop::EngineConfig;

const EXIT_CODES: &str = "\
Exit status:
  0  success
  1  usage error (unknown flag, bad flag value)
  2  invalid configuration (config file, engine or stream parameters)
  3  invalid input data (malformed line, range or sequencing violation)
  4  internal or output failure

On failure a single JSON object is written to standard error:
  {\"error\":{\"kind\":\"data\",\"code\":3,\"message\":\"...\",\"line\":2,\"field\":\"p\"}}";

#[derive(Debug, Parser)]
#[command(
    name = "liftstop",
    version,
    about = "Anytime-valid sequential stopping for token streams",
    after_help = EXIT_CODES
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the stopping engine over a token stream and print its certificate.
    #[command(after_help = EXIT_CODES)]
    Run(RunArgs),
    /// Write a synthetic token stream.
    #[command(after_help = EXIT_CODES)]
    Simulate(SimulateArgs),
    /// Monte Carlo risk curve of the engine on synthetic streams (CSV).
    #[command(after_help = EXIT_CODES)]
    Calibrate(CalibrateArgs),
    /// Empirical risk across variance-inflation factor pairs (CSV).
    #[command(after_help = EXIT_CODES)]
    Sweep(SweepArgs),
    /// Skeleton acceptance diagnostics over a paired-distribution stream.
    #[command(after_help = EXIT_CODES)]
    Diagnose(DiagnoseArgs),
}

/// Engine settings. A `--config` file (JSON, or TOML by extension) is loaded
/// first; flags override it.
#[derive(Debug, Args)]
pub struct EngineArgs {
    /// Engine config file (.json or .toml).
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Total error budget.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyArg>,
    /// Clip bound B for increments, nats.
    #[arg(long)]
    pub clip_bound: Option<f64>,
    /// Increment bound c; grid values must stay below 1/c.
    #[arg(long)]
    pub increment_bound: Option<f64>,
    /// Number of grid values.
    #[arg(long = "grid-k")]
    pub grid_k: Option<usize>,
    #[arg(long)]
    pub lambda_min: Option<f64>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    /// EMA smoothing rate.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Additive variance slack.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub v_factor: Option<f64>,
    #[arg(long)]
    pub eta_factor: Option<f64>,
    /// Center increments on a fixed mean instead of the running estimate.
    #[arg(long, value_name = "MEAN")]
    pub fixed_center: Option<f64>,
    /// Center each increment on estimates from strictly earlier steps.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub strict_predictable: Option<bool>,
    /// Enable or disable the entropy-slope skip rule.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub skip: Option<bool>,
    #[arg(long)]
    pub skip_threshold: Option<f64>,
    #[arg(long, value_enum)]
    pub skip_mode: Option<SkipModeArg>,
    /// Enable or disable drift-triggered resets.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub drift: Option<bool>,
    #[arg(long)]
    pub tau_d: Option<f64>,
    /// Drift detector window, in accepted increments.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub max_segments: Option<u32>,
    /// Force a reset every N steps within a segment.
    #[arg(long, value_name = "N")]
    pub reset_every: Option<u64>,
    /// Enable or disable the boundary/verifier stop gate.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub gate: Option<bool>,
    #[arg(long)]
    pub tau_c: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Seed recorded in the config (and used as the master seed by calibrate
    /// and sweep).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl EngineArgs {
    pub fn apply(&self, cfg: &mut EngineConfig) {
        macro_rules! set {
            ($flag:expr => $field:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        set!(self.delta => cfg.delta);
        set!(self.penalty.map(PenaltyKind::from) => cfg.penalty);
        set!(self.clip_bound => cfg.lift.clip_bound);
        set!(self.increment_bound => cfg.lift.increment_bound);
        set!(self.grid_k => cfg.grid.k);
        set!(self.lambda_min => cfg.grid.lambda_min);
        set!(self.lambda_max => cfg.grid.lambda_max);
        set!(self.alpha => cfg.estimator.alpha);
        set!(self.eta => cfg.estimator.eta);
        set!(self.v_factor => cfg.estimator.v_factor);
        set!(self.eta_factor => cfg.estimator.eta_factor);
        set!(self.fixed_center.map(|mean| Centering::Fixed { mean }) => cfg.centering);
        set!(self.strict_predictable => cfg.strict_predictable);
        set!(self.skip => cfg.skip.enabled);
        set!(self.skip_threshold => cfg.skip.threshold);
        set!(self.skip_mode.map(SkipMode::from) => cfg.skip.mode);
        set!(self.drift => cfg.drift.enabled);
        set!(self.tau_d => cfg.drift.tau_d);
        set!(self.window => cfg.drift.window);
        set!(self.max_segments => cfg.drift.max_segments);
        set!(self.reset_every.map(Some) => cfg.drift.forced_period);
        set!(self.gate => cfg.gate.enabled);
        set!(self.tau_c => cfg.gate.tau_c);
        set!(self.max_steps => cfg.max_steps);
        set!(self.seed => cfg.seed);
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PenaltyArg {
    Gaussian,
    Bernstein,
    Hoeffding,
}

impl From<PenaltyArg> for PenaltyKind {
    fn from(p: PenaltyArg) -> Self {
        match p {
            PenaltyArg::Gaussian => Self::Gaussian,
            PenaltyArg::Bernstein => Self::Bernstein,
            PenaltyArg::Hoeffding => Self::Hoeffding,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SkipModeArg {
    Bypass,
    ZeroUpdate,
}

impl From<SkipModeArg> for SkipMode {
    fn from(m: SkipModeArg) -> Self {
        match m {
            SkipModeArg::Bypass => Self::Bypass,
            SkipModeArg::ZeroUpdate => Self::ZeroUpdate,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Token stream (JSONL); standard input when absent or `-`.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Destination for the run log; standard output when absent or `-`.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// Emit one trace line per step before the certificate.
    #[arg(long)]
    pub trace: bool,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    ClippedGaussian,
    Beta,
    TwoPoint,
}

/// Synthetic stream shape. Starts from a preset and applies overrides.
#[derive(Debug, Args)]
pub struct StreamArgs {
    /// Stationary preset: mean 0.3, scaled Beta(2, 5) noise.
    #[arg(long, conflicts_with = "near_null")]
    pub null: bool,
    /// Low-lift preset: mean 0.15, clipped Gaussian noise with sd 0.2.
    #[arg(long)]
    pub near_null: bool,
    #[arg(long)]
    pub length: Option<u64>,
    /// Increment mean, nats.
    #[arg(long)]
    pub mean: Option<f64>,
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    /// Clipped-Gaussian standard deviation.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Beta shape a.
    #[arg(long)]
    pub beta_a: Option<f64>,
    /// Beta shape b.
    #[arg(long)]
    pub beta_b: Option<f64>,
    /// Two-point probability of the high value.
    #[arg(long)]
    pub p_hi: Option<f64>,
    /// Two-point low value.
    #[arg(long)]
    pub lo: Option<f64>,
    /// Mean jump `STEP:MEAN`; repeatable.
    #[arg(long, value_name = "STEP:MEAN", value_parser = parse_shift)]
    pub drift_at: Vec<MeanShift>,
    /// Mark every k-th step as a boundary (0 disables).
    #[arg(long)]
    pub boundary_every: Option<u64>,
    /// Probability a verifier score passes 0.7.
    #[arg(long, conflicts_with = "no_verifier")]
    pub verifier_pass_rate: Option<f64>,
    /// Omit verifier scores.
    #[arg(long)]
    pub no_verifier: bool,
}

impl StreamArgs {
    /// Build the spec; `near_null_default` picks the preset when neither
    /// `--null` nor `--near-null` is given.
    pub fn spec(&self, near_null_default: bool, seed: u64) -> StreamSpec {
        let near = self.near_null || (near_null_default && !self.null);
        let mut spec = if near { StreamSpec::near_null(seed) } else { StreamSpec::null(seed) };
        if let Some(v) = self.length {
            spec.length = v;
        }
        if let Some(v) = self.mean {
            spec.base_mean = v;
        }
        spec.noise = self.noise(spec.noise);
        if !self.drift_at.is_empty() {
            spec.drift = self.drift_at.clone();
        }
        if let Some(v) = self.boundary_every {
            spec.boundary_every = v;
        }
        if let Some(v) = self.verifier_pass_rate {
            spec.verifier_pass_rate = Some(v);
        }
        if self.no_verifier {
            spec.verifier_pass_rate = None;
        }
        spec
    }

    fn noise(&self, base: NoiseModel) -> NoiseModel {
        let family = self.family.unwrap_or(match base {
            NoiseModel::ClippedGaussian { .. } => FamilyArg::ClippedGaussian,
            NoiseModel::BetaScaled { .. } => FamilyArg::Beta,
            NoiseModel::TwoPoint { .. } => FamilyArg::TwoPoint,
        });
        match family {
            FamilyArg::ClippedGaussian => {
                let preset = match base {
                    NoiseModel::ClippedGaussian { sigma } => sigma,
                    _ => 0.2,
                };
                NoiseModel::ClippedGaussian { sigma: self.sigma.unwrap_or(preset) }
            }
            FamilyArg::Beta => {
                let (a, b) = match base {
                    NoiseModel::BetaScaled { a, b } => (a, b),
                    _ => (2.0, 5.0),
                };
                NoiseModel::BetaScaled {
                    a: self.beta_a.unwrap_or(a),
                    b: self.beta_b.unwrap_or(b),
                }
            }
            FamilyArg::TwoPoint => {
                let (p_hi, lo) = match base {
                    NoiseModel::TwoPoint { p_hi, lo } => (p_hi, lo),
                    _ => (0.5, 0.0),
                };
                NoiseModel::TwoPoint {
                    p_hi: self.p_hi.unwrap_or(p_hi),
                    lo: self.lo.unwrap_or(lo),
                }
            }
        }
    }
}

fn parse_shift(s: &str) -> Result<MeanShift, String> {
    let (step, mean) = s.split_once(':').ok_or("expected STEP:MEAN")?;
    Ok(MeanShift {
        step: step.trim().parse().map_err(|e| format!("step: {e}"))?,
        mean: mean.trim().parse().map_err(|e| format!("mean: {e}"))?,
    })
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub stream: StreamArgs,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Destination; standard output when absent or `-`.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub stream: StreamArgs,
    /// Number of streams (at least 100).
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Center on the stream's exact stationary mean.
    #[arg(long, conflicts_with = "fixed_center")]
    pub oracle_centering: bool,
    /// Risk-curve CSV destination; standard output when absent or `-`.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// Also write the full calibration report as JSON.
    #[arg(long, value_name = "PATH")]
    pub summary: Option<PathBuf>,
    #[command(flatten)]
    pub engine: EngineArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub stream: StreamArgs,
    /// Factor pairs `V,E;V,E;...`.
    #[arg(long, value_name = "PAIRS", value_parser = parse_grid)]
    pub grid: Option<FactorGrid>,
    /// Streams per grid cell (at least 100).
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Sweep CSV destination; standard output when absent or `-`.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    /// Engine settings; without `--config` the sweep preset is the base
    /// (strictly predictable EMA centering, eta 0, lambda_max 5, skip and
    /// drift off).
    #[command(flatten)]
    pub engine: EngineArgs,
}

/// `(v_factor, eta_factor)` pairs from `--grid`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrid(pub Vec<(f64, f64)>);

fn parse_grid(s: &str) -> Result<FactorGrid, String> {
    let cells = s
        .split(';')
        .filter(|cell| !cell.trim().is_empty())
        .map(|cell| {
            let (v, e) = cell.split_once(',').ok_or_else(|| format!("`{cell}`: expected V,E"))?;
            let v = v.trim().parse::<f64>().map_err(|e| format!("`{cell}`: {e}"))?;
            let e = e.trim().parse::<f64>().map_err(|e| format!("`{cell}`: {e}"))?;
            Ok((v, e))
        })
        .collect::<Result<Vec<_>, String>>()?;
    if cells.is_empty() {
        return Err("grid needs at least one V,E pair".into());
    }
    Ok(FactorGrid(cells))
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CorrelationArg {
    Pearson,
    Spearman,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// Paired-distribution stream (JSONL); standard input when absent or `-`.
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Report destination; standard output when absent or `-`.
    #[arg(long, value_name = "PATH")]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub correlation: Option<CorrelationArg>,
    #[arg(long)]
    pub min_steps: Option<usize>,
    #[arg(long)]
    pub kl_min: Option<f64>,
    #[arg(long)]
    pub kl_max: Option<f64>,
    #[arg(long)]
    pub rho_max: Option<f64>,
    #[arg(long)]
    pub saturation_max: Option<f64>,
    /// Lift clip bound B used for the saturation rate.
    #[arg(long)]
    pub clip_bound: Option<f64>,
}

impl DiagnoseArgs {
    pub fn options(&self) -> DiagnoseOptions {
        let mut o = DiagnoseOptions::default();
        if let Some(c) = self.correlation {
            o.correlation = match c {
                CorrelationArg::Pearson => CorrelationMethod::Pearson,
                CorrelationArg::Spearman => CorrelationMethod::Spearman,
            };
        }
        o.min_steps = self.min_steps.unwrap_or(o.min_steps);
        o.kl_min = self.kl_min.unwrap_or(o.kl_min);
        o.kl_max = self.kl_max.unwrap_or(o.kl_max);
        o.rho_max = self.rho_max.unwrap_or(o.rho_max);
        o.saturation_max = self.saturation_max.unwrap_or(o.saturation_max);
        o
    }
}
