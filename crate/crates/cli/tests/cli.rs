//! Exit codes, error objects and output formats of the `liftstop` binary.

use std::io::Write;
use std::process::{Command, Output, Stdio};

fn liftstop(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_liftstop"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn error_object(out: &Output) -> serde_json::Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("{e}: {text}"));
    assert_eq!(v["error"]["code"].as_i64(), out.status.code().map(i64::from));
    v["error"].clone()
}

const TOY: &str = "{\"t\":1,\"p\":0.4,\"s\":0.3}\n{\"t\":2,\"p\":0.8,\"s\":0.2}\n";

#[test]
fn run_reads_stdin_and_prints_one_certificate() {
    let out = liftstop(&["run"], TOY);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    let cert: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(cert["record"], "certificate");
    assert_eq!(cert["outcome"], "timeout");
    assert_eq!(cert["timeout_reason"], "stream_exhausted");
    assert_eq!(cert["config_digest"].as_str().unwrap().len(), 64);
}

#[test]
fn data_errors_exit_3_with_line_and_field() {
    let out = liftstop(&["run"], "{\"t\":1,\"p\":1.2,\"s\":0.2}\n");
    assert_eq!(out.status.code(), Some(3));
    let e = error_object(&out);
    assert_eq!((e["kind"].as_str(), e["line"].as_i64(), e["field"].as_str()), (Some("data"), Some(1), Some("p")));

    let out = liftstop(&["run"], "{\"t\":2,\"p\":0.5,\"s\":0.2}\n{\"t\":1,\"p\":0.5,\"s\":0.2}\n");
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_object(&out)["line"], 2);

    let out = liftstop(&["run"], "{\"t\":1,\"p\":0.5,\"s\":0.2}\n{oops\n");
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_object(&out)["line"], 2);

    // The gate needs verifier scores on every record.
    let out = liftstop(&["run", "--gate"], TOY);
    assert_eq!(out.status.code(), Some(3));

    let out = liftstop(&["run", "--input", "/nonexistent/stream.jsonl"], "");
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_errors_exit_2() {
    let out = liftstop(&["run", "--delta", "1.5"], TOY);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_object(&out)["kind"], "config");

    let out = liftstop(&["run", "--lambda-max", "6"], TOY);
    assert_eq!(out.status.code(), Some(2));

    let out = liftstop(&["run", "--config", "/nonexistent/cfg.toml"], TOY);
    assert_eq!(out.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"delta":0.1,"grid":{"kk":3}}"#).unwrap();
    let out = liftstop(&["run", "--config", cfg.to_str().unwrap()], TOY);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_object(&out)["message"].as_str().unwrap().contains("grid.kk"));

    let out = liftstop(&["calibrate", "--n", "10"], "");
    assert_eq!(out.status.code(), Some(2));
    let out = liftstop(&["simulate", "--mean", "9"], "");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_1() {
    for args in [&["run", "--bogus"][..], &["frobnicate"], &["run", "--penalty", "laplace"], &[]] {
        let out = liftstop(args, "");
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert_eq!(error_object(&out)["kind"], "usage");
    }
}

#[test]
fn output_failures_exit_4() {
    let out = liftstop(&["run", "--output", "/nonexistent/dir/out.jsonl"], TOY);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_object(&out)["kind"], "internal");
}

#[test]
fn help_documents_exit_codes() {
    for args in [&["--help"][..], &["run", "--help"], &["calibrate", "--help"]] {
        let out = liftstop(args, "");
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        for needle in ["0  success", "1  usage", "2  invalid configuration", "3  invalid input data", "4  internal"] {
            assert!(text.contains(needle), "{args:?} help lacks {needle}");
        }
    }
}

#[test]
fn simulate_then_run_with_trace() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("s.jsonl");
    let out = liftstop(
        &["simulate", "--length", "40", "--seed", "3", "--output", stream.to_str().unwrap()],
        "",
    );
    assert!(out.status.success());
    let out = liftstop(&["run", "--trace", "--gate", "--input", stream.to_str().unwrap()], "");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 41);
    assert!(lines[..40].iter().all(|l| l["record"] == "trace"));
    for (i, l) in lines[..40].iter().enumerate() {
        assert_eq!(l["t"], i as u64 + 1);
        for key in ["verdict", "log_mixture", "mu_hat", "v_hat", "segment"] {
            assert!(l.get(key).is_some(), "trace line lacks {key}");
        }
    }
    assert_eq!(lines[40]["record"], "certificate");
}

#[test]
fn csv_outputs_parse_strictly() {
    let out = liftstop(&["calibrate", "--n", "100", "--near-null", "--length", "30"], "");
    assert!(out.status.success());
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    assert_eq!(rdr.headers().unwrap(), vec!["t", "r_t", "ci_lo", "ci_hi"]);
    let rows: Vec<Vec<f64>> = rdr
        .records()
        .map(|r| r.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 30);
    for w in rows.windows(2) {
        assert!(w[1][1] >= w[0][1]);
    }

    let out = liftstop(&["sweep", "--n", "100", "--grid", "1,1;1.3,1.5"], "");
    assert!(out.status.success());
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    assert_eq!(rdr.headers().unwrap(), vec!["v_factor", "eta_factor", "risk", "mean_stop"]);
    assert_eq!(rdr.records().count(), 2);
}

#[test]
fn calibrate_summary_is_json() {
    let dir = tempfile::tempdir().unwrap();
    let summary = dir.path().join("summary.json");
    let out = liftstop(&["calibrate", "--n", "100", "--summary", summary.to_str().unwrap()], "");
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(summary).unwrap()).unwrap();
    assert_eq!(v["n_streams"], 100);
    assert_eq!(v["curve"].as_array().unwrap().len(), 150);
}

#[test]
fn diagnose_reports_json() {
    let line = "{\"t\":1,\"full\":[0.7,0.2,0.1],\"skeleton\":[0.4,0.3,0.3],\"chosen\":0}\n";
    let out = liftstop(&["diagnose"], line);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["n_steps"], 1);
    assert_eq!(v["accepted"], false);
    assert_eq!(v["rejection_reasons"][0], "insufficient-data");

    let bad = "{\"t\":1,\"full\":[0.8,0.2],\"skeleton\":[0.4,0.3,0.3],\"chosen\":0}\n";
    let out = liftstop(&["diagnose"], bad);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_object(&out)["field"], "skeleton");
}
