use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_mixreg-bench");

fn small_config(dir: &Path, map: &[&str], gate: &str) -> PathBuf {
    let path = dir.join("config.json");
    let exprs: Vec<String> = map.iter().map(|e| format!("\"{e}\"")).collect();
    let text = format!(
        r#"{{
  "id": "small",
  "b": 1,
  "d": {d},
  "k": 2,
  "n": 2000,
  "feature_map": [{exprs}],
  "noise": {{"kind": "gaussian", "variance": 0.1}},
  "methods": ["spectral", "em", "spectral_em"],
  "instances": 2,
  "attempts": 2,
  "identifiability_gate": "{gate}",
  "em": {{"max_iter": 50}},
  "seed": 11
}}"#,
        d = map.len(),
        exprs = exprs.join(", ")
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn poly_config(dir: &Path) -> PathBuf {
    small_config(dir, &["1", "t", "t^4", "t^7"], "first_order")
}

fn bench(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn run_writes_one_row_per_attempt_and_method() {
    let dir = TempDir::new().unwrap();
    let cfg = poly_config(dir.path());
    let out = bench(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "config_id,instance,attempt,method,aligned_error,wall_ms,converged");
    assert_eq!(lines.len(), 1 + 2 * 2 * 3);
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 7, "{line}");
        assert!(line.starts_with("small,"));
    }
}

#[test]
fn csv_is_byte_identical_across_runs_and_thread_counts() {
    let dir = TempDir::new().unwrap();
    let cfg = poly_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let a = bench(&["run", "--config", cfg]);
    let b = Command::new(BIN)
        .args(["run", "--config", cfg])
        .env("MIXREG_THREADS", "1")
        .output()
        .unwrap();
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn overrides_apply() {
    let dir = TempDir::new().unwrap();
    let cfg = poly_config(dir.path());
    let out_path = dir.path().join("out.csv");
    let out = bench(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--methods",
        "em",
        "--n",
        "1000",
        "--seed",
        "3",
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(text.lines().count(), 1 + 4);
    assert!(text.lines().skip(1).all(|l| l.split(',').nth(3) == Some("em")));
}

#[test]
fn unidentifiable_map_exits_with_preflight_code() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &["1", "t", "t^2"], "strict");
    let cfg = cfg.to_str().unwrap();
    let run = bench(&["run", "--config", cfg]);
    assert_eq!(run.status.code(), Some(2));
    assert!(run.stdout.is_empty());
    assert!(String::from_utf8_lossy(&run.stderr).contains("p=2"));

    let check = bench(&["check-identifiability", "--config", cfg]);
    assert_eq!(check.status.code(), Some(2));
    let text = stdout(&check);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "order,sigma_min,threshold,pass");
    assert!(rows[1].ends_with(",true"));
    assert!(rows[2].starts_with("2,") && rows[2].ends_with(",false"));
}

#[test]
fn identifiable_map_passes_check() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), &["1", "t"], "strict");
    let out = bench(&["check-identifiability", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn other_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.json");
    assert_eq!(bench(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(1));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"b": 1, "d": 3, "k": 2, "n": 10, "feature_map": ["1", "t"],
        "noise": {"kind": "gaussian", "variance": 0.1}, "methods": ["em"],
        "instances": 1, "attempts": 1}"#)
        .unwrap();
    let out = bench(&["run", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("feature map"));
}

#[test]
fn json_report_feeds_histogram() {
    let dir = TempDir::new().unwrap();
    let cfg = poly_config(dir.path());
    let report = dir.path().join("report.json");
    let run = bench(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--format",
        "json",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(run.status.success());
    let hist = bench(&["histogram", "--report", report.to_str().unwrap(), "--method", "em", "--bins", "3"]);
    assert!(hist.status.success(), "{}", String::from_utf8_lossy(&hist.stderr));
    let text = stdout(&hist);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "bin_lo,bin_hi,count");
    assert_eq!(rows.len(), 4);
    let total: usize = rows[1..].iter().map(|r| r.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 4);
}

#[test]
fn curve_writes_one_row_per_size_and_method() {
    let dir = TempDir::new().unwrap();
    let cfg = poly_config(dir.path());
    let out = bench(&[
        "curve",
        "--config",
        cfg.to_str().unwrap(),
        "--methods",
        "em,spectral_em",
        "--ns",
        "500,1500",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "n,method,mean,std,median,count,failures");
    assert_eq!(&rows[1][..7], "500,em,");
    assert!(rows[2].starts_with("500,spectral_em,"));
    assert!(rows[3].starts_with("1500,em,"));
    assert_eq!(rows.len(), 5);
}

#[test]
fn shipped_configs_validate() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        spectral_experts::experiment::ExperimentConfig::load(&path)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 4);
}
