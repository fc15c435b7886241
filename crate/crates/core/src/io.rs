//! File formats: token streams, paired-distribution streams, engine configs,
//! run logs, and CSV reports.
//!
//! Streams are line-delimited JSON, one object per line:
//!
//! ```text
//! {"t":1,"p":0.8,"s":0.2,"H":1.1,"boundary":true,"verifier":0.9,"token":"the"}
//! ```
//!
//! `H`, `boundary` (default `false`), `verifier` and `token` are optional.
//! Unknown keys are ignored and blank lines skipped. Probabilities are linear,
//! never log-space. Errors carry the 1-based physical line number and, for
//! range violations, the offending key.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, EngineConfig};
use crate::controller::{Certificate, ControlError, TraceEntry};
use crate::lift::{LiftError, TokenRecord};
use crate::simlab::{CalibrationReport, SweepRow};
use crate::skeleton::{DistStep, ProbVector};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: unparseable record: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: field `{field}` {reason}")]
    Field {
        line: usize,
        field: &'static str,
        reason: String,
    },

    #[error("line {line}: t = {got} does not increase past {previous}")]
    Sequencing { line: usize, previous: u64, got: u64 },

    #[error("config {path}: {message}")]
    ConfigFile { path: String, message: String },

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Engine(#[from] ControlError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Wire form of one stream line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamLine {
    pub t: u64,
    pub p: f64,
    pub s: f64,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default)]
    pub boundary: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verifier: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

impl From<StreamLine> for TokenRecord {
    fn from(l: StreamLine) -> Self {
        TokenRecord {
            index: l.t,
            full_prob: l.p,
            skeleton_prob: l.s,
            entropy: l.h,
            is_boundary: l.boundary,
            verifier_score: l.verifier,
            token_text: l.token,
        }
    }
}

impl From<&TokenRecord> for StreamLine {
    fn from(r: &TokenRecord) -> Self {
        StreamLine {
            t: r.index,
            p: r.full_prob,
            s: r.skeleton_prob,
            h: r.entropy,
            boundary: r.is_boundary,
            verifier: r.verifier_score,
            token: r.token_text.clone(),
        }
    }
}

fn wire_field(record_field: &'static str) -> &'static str {
    match record_field {
        "full_prob" => "p",
        "skeleton_prob" => "s",
        "entropy" => "H",
        "verifier_score" => "verifier",
        other => other,
    }
}

/// Reads non-blank lines, tracking the physical line number.
struct Lines<R> {
    reader: R,
    line: usize,
    buf: String,
}

impl<R: BufRead> Lines<R> {
    fn new(reader: R) -> Self {
        Self {
            reader,
            line: 0,
            buf: String::new(),
        }
    }

    fn next_line(&mut self) -> Option<Result<(usize, &str), IoError>> {
        loop {
            self.buf.clear();
            match self.reader.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {
                    self.line += 1;
                    if !self.buf.trim().is_empty() {
                        return Some(Ok((self.line, self.buf.trim())));
                    }
                }
                Err(e) => return Some(Err(e.into())),
            }
        }
    }
}

/// Lazy, validating reader over a token stream. Stops after the first error.
pub struct StreamReader<R> {
    lines: Lines<R>,
    previous: Option<u64>,
    failed: bool,
}

/// Parse a token stream lazily.
pub fn parse_stream<R: BufRead>(reader: R) -> StreamReader<R> {
    StreamReader {
        lines: Lines::new(reader),
        previous: None,
        failed: false,
    }
}

impl<R: BufRead> StreamReader<R> {
    fn parse_line(&mut self, line: usize, text: &str) -> Result<TokenRecord, IoError> {
        let wire: StreamLine = serde_json::from_str(text).map_err(|e| IoError::Parse {
            line,
            message: e.to_string(),
        })?;
        let record = TokenRecord::from(wire);
        if let Err(LiftError::MalformedRecord { field, value }) = record.validate() {
            return Err(IoError::Field {
                line,
                field: wire_field(field),
                reason: format!("out of range: {value}"),
            });
        }
        if let Some(previous) = self.previous {
            if record.index <= previous {
                return Err(IoError::Sequencing {
                    line,
                    previous,
                    got: record.index,
                });
            }
        }
        self.previous = Some(record.index);
        Ok(record)
    }
}

impl<R: BufRead> Iterator for StreamReader<R> {
    type Item = Result<TokenRecord, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let (line, text) = match self.lines.next_line()? {
            Ok((line, text)) => (line, text.to_owned()),
            Err(e) => {
                self.failed = true;
                return Some(Err(e));
            }
        };
        let out = self.parse_line(line, &text);
        self.failed = out.is_err();
        Some(out)
    }
}

/// Write records as stream lines, one JSON object each.
pub fn write_stream<'a, W, I>(mut w: W, records: I) -> Result<(), IoError>
where
    W: Write,
    I: IntoIterator<Item = &'a TokenRecord>,
{
    for r in records {
        serde_json::to_writer(&mut w, &StreamLine::from(r))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Wire form of one paired-distribution line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistLine {
    pub t: u64,
    pub full: Vec<f64>,
    pub skeleton: Vec<f64>,
    pub chosen: usize,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
}

/// Read a whole paired-distribution stream (diagnostics need random access).
pub fn parse_dist_stream<R: BufRead>(reader: R) -> Result<Vec<DistStep>, IoError> {
    let mut lines = Lines::new(reader);
    let mut previous: Option<u64> = None;
    let mut out = Vec::new();
    while let Some(next) = lines.next_line() {
        let (line, text) = next?;
        let wire: DistLine = serde_json::from_str(text).map_err(|e| IoError::Parse {
            line,
            message: e.to_string(),
        })?;
        if let Some(prev) = previous {
            if wire.t <= prev {
                return Err(IoError::Sequencing {
                    line,
                    previous: prev,
                    got: wire.t,
                });
            }
        }
        previous = Some(wire.t);
        let field = |field: &'static str, reason: String| IoError::Field { line, field, reason };
        let full = ProbVector::new(wire.full).map_err(|e| field("full", e.to_string()))?;
        let skeleton = ProbVector::new(wire.skeleton).map_err(|e| field("skeleton", e.to_string()))?;
        if full.len() != skeleton.len() {
            return Err(field(
                "skeleton",
                format!("has {} entries, full has {}", skeleton.len(), full.len()),
            ));
        }
        if wire.chosen >= full.len() {
            return Err(field("chosen", format!("{} outside vocabulary of {}", wire.chosen, full.len())));
        }
        if let Some(h) = wire.h {
            if !(h >= 0.0 && h.is_finite()) {
                return Err(field("H", format!("out of range: {h}")));
            }
        }
        out.push(DistStep {
            full,
            skeleton,
            chosen: wire.chosen,
            entropy: wire.h,
        });
    }
    Ok(out)
}

/// Write paired-distribution lines; `t` counts from 1.
pub fn write_dist_stream<W: Write>(mut w: W, steps: &[DistStep]) -> Result<(), IoError> {
    for (i, step) in steps.iter().enumerate() {
        let line = DistLine {
            t: i as u64 + 1,
            full: step.full.probs().to_vec(),
            skeleton: step.skeleton.probs().to_vec(),
            chosen: step.chosen,
            h: step.entropy,
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConfigFormat {
    Json,
    Toml,
}

impl ConfigFormat {
    /// `.toml` files are TOML; anything else is read as JSON.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("toml") => Self::Toml,
            _ => Self::Json,
        }
    }
}

/// Parse a config document. Missing keys take defaults; unknown keys are
/// rejected so a misspelt setting cannot silently fall back to its default.
/// Range checks happen later, in [`EngineConfig::validate`].
pub fn parse_config(text: &str, format: ConfigFormat) -> Result<EngineConfig, String> {
    let doc: serde_json::Value = match format {
        ConfigFormat::Json => serde_json::from_str(text).map_err(|e| e.to_string())?,
        ConfigFormat::Toml => toml::from_str(text).map_err(|e| e.to_string())?,
    };
    let cfg: EngineConfig = serde_json::from_value(doc.clone()).map_err(|e| e.to_string())?;
    let known = serde_json::to_value(&cfg).map_err(|e| e.to_string())?;
    if let Some(path) = unknown_key(&doc, &known, String::new()) {
        return Err(format!("unknown key `{path}`"));
    }
    Ok(cfg)
}

fn unknown_key(doc: &serde_json::Value, known: &serde_json::Value, prefix: String) -> Option<String> {
    let (serde_json::Value::Object(doc), serde_json::Value::Object(known)) = (doc, known) else {
        return None;
    };
    for (key, value) in doc {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match known.get(key) {
            None => return Some(path),
            Some(k) => {
                if let Some(found) = unknown_key(value, k, path) {
                    return Some(found);
                }
            }
        }
    }
    None
}

pub fn load_config(path: &Path) -> Result<EngineConfig, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::ConfigFile {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config(&text, ConfigFormat::from_path(path)).map_err(|message| IoError::ConfigFile {
        path: path.display().to_string(),
        message,
    })
}

/// One line of a run log; the `record` key tells the two kinds apart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum RunLogLine {
    Trace(TraceEntry),
    Certificate(Certificate),
}

/// Trace lines (when the certificate carries a trace) followed by exactly one
/// certificate line, which omits the trace.
pub fn write_run_log<W: Write>(mut w: W, cert: &Certificate) -> Result<(), IoError> {
    let mut cert = cert.clone();
    for entry in cert.trace.take().unwrap_or_default() {
        serde_json::to_writer(&mut w, &RunLogLine::Trace(entry))?;
        w.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut w, &RunLogLine::Certificate(cert))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_run_log`]: reattaches any trace lines to the certificate.
pub fn read_run_log<R: BufRead>(reader: R) -> Result<Certificate, IoError> {
    let mut lines = Lines::new(reader);
    let mut trace = Vec::new();
    let mut cert: Option<Certificate> = None;
    while let Some(next) = lines.next_line() {
        let (line, text) = next?;
        if cert.is_some() {
            return Err(IoError::Parse {
                line,
                message: "content after the certificate".into(),
            });
        }
        match serde_json::from_str(text).map_err(|e| IoError::Parse {
            line,
            message: e.to_string(),
        })? {
            RunLogLine::Trace(entry) => trace.push(entry),
            RunLogLine::Certificate(c) => cert = Some(c),
        }
    }
    let mut cert = cert.ok_or(IoError::Parse {
        line: lines.line,
        message: "run log has no certificate".into(),
    })?;
    if !trace.is_empty() {
        cert.trace = Some(trace);
    }
    Ok(cert)
}

#[derive(Serialize)]
struct RiskRow {
    t: u64,
    r_t: f64,
    ci_lo: f64,
    ci_hi: f64,
}

/// Columns `t, r_t, ci_lo, ci_hi`.
pub fn write_risk_csv<W: Write>(w: W, report: &CalibrationReport) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    for p in &report.curve {
        out.serialize(RiskRow {
            t: p.t,
            r_t: p.risk,
            ci_lo: p.ci_lo,
            ci_hi: p.ci_hi,
        })?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `v_factor, eta_factor, risk, mean_stop`.
pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<(), IoError> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}

/// Serialize any snapshot-able value (engine state, reports) as one JSON line.
pub fn write_json_line<W: Write, T: Serialize>(mut w: W, value: &T) -> Result<(), IoError> {
    serde_json::to_writer(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}
