use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "n_layers": 2, "d_model": 16, "n_heads": 2, "prefix_len": 2,
  "pretrain_steps": 100, "batch_size": 4,
  "rounds": 3, "local_steps": 2, "server_steps": 2, "kd_steps": 10,
  "prompt_lr": 0.01, "server_lr": 0.01
}"#;

fn fedsp(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsp"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fedsp(dir, args);
    assert!(out.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A temp dir holding `tiny.json` and a pretrained `g.fspt`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    ok(dir.path(), &["pretrain", "--config", "tiny.json", "--global-checkpoint", "g.fspt", "--out", "pre"]);
    dir
}

fn run_args<'a>(mode: &'a str, out: &'a str) -> Vec<&'a str> {
    vec!["run", "--config", "tiny.json", "--global-checkpoint", "g.fspt", "--mode", mode, "--seed", "0", "--out", out]
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let ws = workspace();
    let dir = ws.path();
    ok(dir, &run_args("fedsp", "a"));
    ok(dir, &run_args("fedsp", "b"));
    for f in ["metrics.jsonl", "summary.json", "prompts.fspt", "aux.fspt", "kd_curve.csv"] {
        let a = std::fs::read(dir.join("a").join(f)).unwrap();
        let b = std::fs::read(dir.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{} differs", f);
    }
    let metrics = std::fs::read_to_string(dir.join("a/metrics.jsonl")).unwrap();
    let rounds: Vec<f64> = metrics.lines().map(|l| field(l, "round")).collect();
    assert_eq!(rounds, vec![1.0, 2.0, 3.0]);
}

/// Numeric value of `key` in a JSON object rendered compactly or pretty.
fn field(json: &str, key: &str) -> f64 {
    let pat = format!("\"{}\":", key);
    let start = json.find(&pat).unwrap_or_else(|| panic!("no {} in {}", key, json)) + pat.len();
    json[start..]
        .trim_start()
        .split(|c: char| c == ',' || c == '}' || c.is_whitespace())
        .next()
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn config_echo_matches_the_resolved_flags() {
    let ws = workspace();
    let dir = ws.path();
    ok(dir, &run_args("fedprompt_single", "s"));
    let echo = std::fs::read_to_string(dir.join("s/config.json")).unwrap();
    assert!(echo.contains("\"mode\": \"fedprompt_single\""));
    assert!(echo.contains("\"rounds\": 3"));
    assert!(echo.contains("\"global_checkpoint\": \"g.fspt\""));
}

#[test]
fn zero_shot_records_no_traffic() {
    let ws = workspace();
    let dir = ws.path();
    let stdout = ok(dir, &run_args("zero_shot", "z"));
    assert!(stdout.contains("bytes up 0 down 0"), "{}", stdout);
    let metrics = std::fs::read_to_string(dir.join("z/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert!(metrics.contains("\"uploaded_bytes\":0"));
    assert!(metrics.contains("\"downloaded_bytes\":0"));
}

#[test]
fn eval_reproduces_the_recorded_final_accuracy() {
    let ws = workspace();
    let dir = ws.path();
    ok(dir, &run_args("fedsp", "a"));
    let acc: f64 = ok(
        dir,
        &["eval", "--config", "tiny.json", "--global-checkpoint", "g.fspt", "--prompts", "a/prompts.fspt"],
    )
    .trim()
    .parse()
    .unwrap();
    let summary = std::fs::read_to_string(dir.join("a/summary.json")).unwrap();
    assert!((field(&summary, "final_acc") - acc).abs() < 1e-6, "{} vs {}", acc, summary);
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"roundz": 3}"#).unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    for args in [
        vec!["run", "--config", "bad.json"],
        vec!["run", "--config", "missing.json"],
        vec!["run", "--config", "tiny.json", "--aux-layers", "3"],
        vec!["run", "--mode", "bogus"],
        vec!["sweep", "--config", "tiny.json", "--grid-selection", "SIDE"],
    ] {
        let out = fedsp(dir.path(), &args);
        assert_eq!(out.status.code(), Some(2), "{:?}", args);
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(!err.trim().is_empty());
    }
    let out = fedsp(dir.path(), &["run", "--config", "bad.json"]);
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);
}

#[test]
fn missing_checkpoint_exits_with_3() {
    let ws = workspace();
    let dir = ws.path();
    for args in [
        vec!["run", "--config", "tiny.json", "--global-checkpoint", "absent.fspt"],
        vec!["distill", "--config", "tiny.json", "--global-checkpoint", "absent.fspt"],
        vec!["eval", "--config", "tiny.json", "--global-checkpoint", "g.fspt", "--prompts", "absent.fspt"],
    ] {
        let out = fedsp(dir, &args);
        assert_eq!(out.status.code(), Some(3), "{:?}", args);
        assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);
    }
}

#[test]
fn distilled_client_model_is_reused_by_run() {
    let ws = workspace();
    let dir = ws.path();
    ok(dir, &["distill", "--config", "tiny.json", "--global-checkpoint", "g.fspt", "--out", "kd"]);
    let mut args = run_args("fedsp", "a");
    args.extend(["--aux-checkpoint", "kd/aux.fspt"]);
    ok(dir, &args);
    assert!(!dir.join("a/kd_curve.csv").exists());
    assert!(dir.join("a/summary.json").exists());
}

#[test]
fn sweep_writes_one_row_per_selection() {
    let ws = workspace();
    let dir = ws.path();
    let args = ["sweep", "--config", "tiny.json", "--global-checkpoint", "g.fspt", "--out", "sw", "--rounds", "1"];
    let md = ok(dir, &args);
    for sel in ["BOT", "MID", "TOP"] {
        assert!(md.lines().any(|l| l.starts_with(&format!("| {} |", sel))), "{}", md);
    }
    assert_eq!(std::fs::read_to_string(dir.join("sw/sweep.md")).unwrap(), md);
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn accuracy_row(md: &str, mode: &str) -> (usize, f64) {
    let (i, line) = md
        .lines()
        .enumerate()
        .find(|(_, l)| l.starts_with(&format!("| {} |", mode)))
        .unwrap_or_else(|| panic!("no row for {} in\n{}", mode, md));
    let avg: f64 = line.split('|').map(str::trim).filter(|c| !c.is_empty()).nth_back(1).unwrap().parse().unwrap();
    (i, avg)
}

#[test]
fn report_on_golden_runs_ranks_fedsp_above_fedprompt_single() {
    let dir = tempfile::tempdir().unwrap();
    let golden = golden_dir();
    let md = ok(dir.path(), &["report", golden.to_str().unwrap(), "--output", "report.md"]);
    assert_eq!(std::fs::read_to_string(dir.path().join("report.md")).unwrap(), md);
    let (fedsp_row, fedsp_acc) = accuracy_row(&md, "fedsp");
    let (single_row, single_acc) = accuracy_row(&md, "fedprompt_single");
    assert!(fedsp_row < single_row);
    assert!(fedsp_acc > single_acc, "{} vs {}", fedsp_acc, single_acc);
    assert!(md.contains("## Model size and communication"));
}
