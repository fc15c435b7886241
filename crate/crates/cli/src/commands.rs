//! Subcommand bodies. Each returns `Ok` or a classified [`CliError`].

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use liftstop::io::{
    load_config, parse_dist_stream, parse_stream, write_json_line, write_risk_csv, write_run_log,
    write_stream, write_sweep_csv, IoError,
};
use liftstop::simlab::{
    generate_stream, monte_carlo_risk, sensitivity_sweep, sweep_engine_config, DEFAULT_INFLATION_GRID,
};
use liftstop::skeleton::diagnose;
use liftstop::{Engine, EngineConfig, LiftConfig};

use crate::args::{CalibrateArgs, Command, DiagnoseArgs, EngineArgs, RunArgs, SimulateArgs, SweepArgs};
use crate::error::CliError;

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(a) => run(a),
        Command::Simulate(a) => simulate(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Sweep(a) => sweep(a),
        Command::Diagnose(a) => diagnose_cmd(a),
    }
}

fn is_std(path: &Option<PathBuf>) -> bool {
    path.as_deref().is_none_or(|p| p == Path::new("-"))
}

fn open_input(path: &Option<PathBuf>) -> Result<Box<dyn BufRead>, CliError> {
    if is_std(path) {
        return Ok(Box::new(BufReader::new(io::stdin().lock())));
    }
    let path = path.as_deref().expect("checked above");
    let file = File::open(path).map_err(|e| CliError::data(format!("cannot open {}: {e}", path.display())))?;
    Ok(Box::new(BufReader::new(file)))
}

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    if is_std(path) {
        return Ok(Box::new(BufWriter::new(io::stdout().lock())));
    }
    let path = path.as_deref().expect("checked above");
    let file = File::create(path)
        .map_err(|e| CliError::internal(format!("cannot create {}: {e}", path.display())))?;
    Ok(Box::new(BufWriter::new(file)))
}

/// Base config (file or `base`), then flags, then validation.
fn engine_config(args: &EngineArgs, base: EngineConfig) -> Result<EngineConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => base,
    };
    args.apply(&mut cfg);
    cfg.validate().map_err(IoError::from)?;
    Ok(cfg)
}

fn run(a: RunArgs) -> Result<(), CliError> {
    let cfg = engine_config(&a.engine, EngineConfig::default())?;
    let engine = Engine::new(cfg).map_err(IoError::from)?;
    let input = open_input(&a.input)?;
    let cert = engine.try_run(parse_stream(input), a.trace).map_err(CliError::reading)?;
    write_run_log(open_output(&a.output)?, &cert).map_err(CliError::writing)
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let spec = a.stream.spec(false, a.seed);
    let records = generate_stream(&spec)?;
    write_stream(open_output(&a.output)?, &records).map_err(CliError::writing)
}

fn calibrate(a: CalibrateArgs) -> Result<(), CliError> {
    let mut cfg = engine_config(&a.engine, EngineConfig::default())?;
    let mut spec = a.stream.spec(false, cfg.seed);
    spec.clip_bound = cfg.lift.clip_bound;
    if a.oracle_centering {
        spec.validate()?;
        cfg = spec.oracle_config(&cfg);
    }
    let report = monte_carlo_risk(&spec, &cfg, a.n)?;
    write_risk_csv(open_output(&a.output)?, &report).map_err(CliError::writing)?;
    if let Some(path) = &a.summary {
        write_json_line(open_output(&Some(path.clone()))?, &report).map_err(CliError::writing)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<(), CliError> {
    let cfg = engine_config(&a.engine, sweep_engine_config())?;
    let mut spec = a.stream.spec(true, cfg.seed);
    spec.clip_bound = cfg.lift.clip_bound;
    let grid = a.grid.clone().map_or_else(|| DEFAULT_INFLATION_GRID.to_vec(), |g| g.0);
    let rows = sensitivity_sweep(&spec, &cfg, &grid, a.n)?;
    write_sweep_csv(open_output(&a.output)?, &rows).map_err(CliError::writing)
}

fn diagnose_cmd(a: DiagnoseArgs) -> Result<(), CliError> {
    let mut lift = LiftConfig::default();
    if let Some(b) = a.clip_bound {
        lift.clip_bound = b;
    }
    lift.validate().map_err(|e| CliError::config(e.to_string()))?;
    let steps = parse_dist_stream(open_input(&a.input)?).map_err(CliError::reading)?;
    let report = diagnose(&steps, &lift, &a.options())?;
    write_json_line(open_output(&a.output)?, &report).map_err(CliError::writing)
}
