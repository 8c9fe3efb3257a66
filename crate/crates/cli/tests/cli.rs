use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kmds_core::experiment::{sha256_file, Manifest};
use kmds_core::io::{parse_json, read_tensor};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn kmds(args: &[&str], extra: &[PathBuf]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kmds")).args(args).args(extra).output().expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn simulate(config: &Path, out: &Path) {
    ok(&kmds(&["simulate", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]));
}

fn noisy_inputs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("noisy_") && p.extension().unwrap() == "bin")
        .collect();
    v.sort();
    v
}

#[test]
fn single_realization_writes_one_noisy_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("one.toml");
    std::fs::write(&cfg, "n_realizations = 1\n[phantom]\ndims = [8, 8, 1]\n").unwrap();
    simulate(&cfg, &dir.path().join("out"));
    assert_eq!(noisy_inputs(&dir.path().join("out")).len(), 1);
    let m = Manifest::read(&dir.path().join("out/manifest.json")).unwrap();
    assert_eq!(m.seeds.len(), 1);
    for (name, hash) in &m.files {
        assert_eq!(&sha256_file(&dir.path().join("out").join(name)).unwrap(), hash, "{}", name);
    }
}

#[test]
fn default_protocol_spans_one_hour() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("fdg.toml");
    std::fs::write(&cfg, "[phantom]\ndims = [32, 32, 4]\n").unwrap();
    simulate(&cfg, &dir.path().join("out"));
    let m = Manifest::read(&dir.path().join("out/manifest.json")).unwrap();
    assert_eq!(m.dims, [32, 32, 4, 24]);
    assert_eq!(m.frame_durations_s.iter().sum::<f64>(), 3600.0);
}

#[test]
fn simulate_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate(&fixture("small.toml"), &a);
    simulate(&fixture("small.toml"), &b);
    for e in std::fs::read_dir(&a).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{:?}", name);
    }
}

#[test]
fn seed_flag_changes_noise_and_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture("small.toml");
    simulate(&cfg, &dir.path().join("a"));
    ok(&kmds(
        &["simulate", "--seed", "99", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("b").to_str().unwrap()],
        &[],
    ));
    let ma = Manifest::read(&dir.path().join("a/manifest.json")).unwrap();
    let mb = Manifest::read(&dir.path().join("b/manifest.json")).unwrap();
    assert_eq!(mb.seeds, vec![99, 100, 101]);
    assert_ne!(ma.config_hash, mb.config_hash);
    assert_eq!(ma.files["truth.bin"], mb.files["truth.bin"]);
    assert_ne!(ma.files["noisy_000.bin"], mb.files["noisy_000.bin"]);
}

#[test]
fn identity_config_returns_input() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    simulate(&fixture("small.toml"), &sim);
    let input = sim.join("noisy_000.bin");
    let out = dir.path().join("den");
    ok(&kmds(
        &["denoise", "--config", fixture("identity.toml").to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[input.clone()],
    ));
    let (y, _) = read_tensor(&input).unwrap();
    let (x, _) = read_tensor(&out.join("noisy_000_xhat.bin")).unwrap();
    assert!(x.max_abs_diff(&y).unwrap() <= 1e-6 * y.data().iter().cloned().fold(0.0, f64::max));
    let trace = std::fs::read_to_string(out.join("noisy_000_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,data_fit,l1,total\n"));
    assert_eq!(trace.lines().count(), 22);
    assert!(out.join("noisy_000_report.json").exists());
}

#[test]
fn debug_dumps_written_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    simulate(&fixture("small.toml"), &sim);
    let out = dir.path().join("den");
    ok(&kmds(
        &[
            "denoise",
            "--debug-dumps",
            "--config",
            fixture("small.toml").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
        &[sim.join("noisy_001.bin")],
    ));
    for name in ["alpha", "beta", "alpha_hat", "kernel"] {
        assert!(out.join(format!("noisy_001_{}.bin", name)).exists(), "{}", name);
    }
    let (beta, _) = read_tensor(&out.join("noisy_001_beta.bin")).unwrap();
    assert_eq!(beta.dims(), [12, 12, 2, 3]);
}

#[test]
fn missing_header_field_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    simulate(&fixture("small.toml"), &sim);
    let side = sim.join("noisy_000.json");
    let text = std::fs::read_to_string(&side).unwrap();
    let broken: String = text.lines().filter(|l| !l.contains("\"units\"")).collect::<Vec<_>>().join("\n");
    std::fs::write(&side, broken).unwrap();
    let o = kmds(&["denoise", "--out", dir.path().join("d").to_str().unwrap()], &[sim.join("noisy_000.bin")]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("units") && err.contains("byte offset"), "{}", err);
}

#[test]
fn config_problems_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "n_realizations = 2\nmystery = true\n").unwrap();
    let o = kmds(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mystery"));
    assert_eq!(kmds(&["denoise"], &[]).status.code(), Some(1));
    assert_eq!(kmds(&["frobnicate"], &[]).status.code(), Some(1));
}

#[test]
fn evaluate_truth_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    simulate(&fixture("small.toml"), &sim);
    let truth = sim.join("truth.bin");
    let o = kmds(
        &[
            "evaluate",
            "--truth",
            truth.to_str().unwrap(),
            "--rois",
            sim.join("rois.json").to_str().unwrap(),
            "--out",
            dir.path().join("ev").to_str().unwrap(),
        ],
        &[truth.clone()],
    );
    ok(&o);
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv, std::fs::read_to_string(dir.path().join("ev/metrics.csv")).unwrap());
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[2], "inf");
        assert!((f[3].parse::<f64>().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(f[4], "0");
    }
}

#[test]
fn evaluate_rejects_mismatched_dims() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    simulate(&fixture("small.toml"), &a);
    let cfg = dir.path().join("other.toml");
    std::fs::write(&cfg, "[phantom]\ndims = [8, 8, 1]\n[protocol]\ndurations_s = [60.0, 60.0]\n").unwrap();
    simulate(&cfg, &b);
    let o = kmds(
        &["evaluate", "--truth", a.join("truth.bin").to_str().unwrap(), "--out", dir.path().to_str().unwrap()],
        &[b.join("noisy_000.bin")],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_check_passes_and_reports_every_property() {
    let dir = tempfile::tempdir().unwrap();
    let o = kmds(&["oracle-check", "--instances", "10", "--out", dir.path().to_str().unwrap()], &[]);
    ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().all(|l| l.starts_with("PASS ") && l.contains("max_dev=")));
    assert!(dir.path().join("oracle_report.json").exists());
    let big = kmds(&["oracle-check", "--max-dims", "40,40,4,4", "--out", dir.path().to_str().unwrap()], &[]);
    assert_eq!(big.status.code(), Some(2));
}

#[test]
fn golden_fixture_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let den = dir.path().join("den");
    simulate(&fixture("small.toml"), &sim);
    ok(&kmds(
        &["denoise", "--config", fixture("small.toml").to_str().unwrap(), "--out", den.to_str().unwrap()],
        &noisy_inputs(&sim),
    ));
    let golden: BTreeMap<String, String> =
        parse_json(&std::fs::read_to_string(fixture("small_golden.json")).unwrap(), "golden").unwrap();
    for (name, hash) in &golden {
        let path = if name.contains("xhat") { den.join(name) } else { sim.join(name) };
        assert_eq!(&sha256_file(&path).unwrap(), hash, "{}", name);
    }
    let mut outputs: Vec<PathBuf> = (0..3).map(|i| den.join(format!("noisy_{:03}_xhat.bin", i))).collect();
    outputs.sort();
    let o = kmds(
        &[
            "evaluate",
            "--truth",
            sim.join("truth.bin").to_str().unwrap(),
            "--rois",
            sim.join("rois.json").to_str().unwrap(),
            "--out",
            dir.path().join("ev").to_str().unwrap(),
        ],
        &outputs,
    );
    ok(&o);
    assert_eq!(
        std::fs::read_to_string(dir.path().join("ev/metrics.csv")).unwrap(),
        std::fs::read_to_string(fixture("small_metrics.csv")).unwrap()
    );
}
