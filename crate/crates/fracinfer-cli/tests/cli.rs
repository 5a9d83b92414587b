use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fracinfer::estimator::{preset, simulate_observations};
use fracinfer::fbm::{simulate_fbm, HurstParam, TimeGrid};
use fracinfer_cli::commands::read_observations;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fracinfer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_writes_header_and_initial_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let o = run(&["simulate", "--preset", "ou", "--seed", "4", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("observations.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,y1");
    assert_eq!(lines.len(), 1 + 51);
    assert_eq!(lines[1], "0.0,0.0");
    let meta = std::fs::read_to_string(out.join("simulate.meta.toml")).unwrap();
    assert!(meta.contains("seed = 4") && meta.contains("config_hash = "));
}

#[test]
fn simulate_is_byte_identical_across_reruns_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(&["simulate", "--preset", "linear2d", "--fbm", "--seed", "9", "--out", s(&a)])), 0);
    assert_eq!(code(&run(&["--threads", "1", "simulate", "--preset", "linear2d", "--fbm", "--seed", "9", "--out", s(&b)])), 0);
    for f in ["observations.csv", "simulate.meta.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_hurst_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "preset = \"ou\"\n[experiment]\nhurst = 0.4\n");
    let o = run(&["simulate", "-c", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("1/2") || stderr(&o).contains("0.4"), "{}", stderr(&o));
}

#[test]
fn steps_must_be_a_multiple_of_observations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "preset = \"ou\"\n[experiment]\nsteps = 510\n");
    let o = run(&["simulate", "-c", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("multiple"), "{}", stderr(&o));
}

#[test]
fn simulated_csv_round_trips_without_drift() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["simulate", "--preset", "linear2d", "--seed", "21", "--out", s(dir.path())])), 0);
    let p = preset("linear2d").unwrap();
    let model = p.model_spec().unwrap();
    let want = simulate_observations(&model, &p.theta_true, &p.initial, p.hurst_param().unwrap(), p.grid().unwrap(), p.observations, 21).unwrap();
    let got = read_observations(&dir.path().join("observations.csv"), 2, &p.initial).unwrap();
    assert_eq!(got, want);
}

#[test]
fn malformed_csv_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(dir.path(), "obs.csv", "t,y1\n0,0\n5,0.3\n10,abc\n");
    let o = run(&["estimate", "--preset", "ou", "--input", s(&csv), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

fn small_estimate_config(dir: &Path, extra: &str) -> PathBuf {
    write(
        dir,
        "est.toml",
        &format!(
            "preset = \"ou\"\nseed = 5\n[experiment]\nhorizon = 50.0\nobservations = 10\nsteps = 100\npaths = 64\niterations = 3\nreplications = 2\n{extra}"
        ),
    )
}

#[test]
fn estimate_on_csv_is_reproducible_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_estimate_config(dir.path(), "");
    let data = dir.path().join("data");
    assert_eq!(code(&run(&["simulate", "-c", s(&cfg), "--out", s(&data)])), 0);
    let input = data.join("observations.csv");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let oa = run(&["--threads", "1", "estimate", "-c", s(&cfg), "--input", s(&input), "--out", s(&a)]);
    let ob = run(&["--threads", "3", "estimate", "-c", s(&cfg), "--input", s(&input), "--out", s(&b)]);
    assert_eq!(code(&oa), 0, "{}", stderr(&oa));
    assert_eq!(code(&ob), 0, "{}", stderr(&ob));
    for f in ["report.toml", "trace.csv", "histogram.csv", "diagnostics.csv", "estimate.meta.toml"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let trace = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);
    assert!(trace.starts_with("replication,iteration,theta1,score1,score_se1,skipped"));
}

#[test]
fn estimate_replications_write_histogram() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_estimate_config(dir.path(), "");
    let o = run(&["estimate", "-c", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("report.toml")).unwrap();
    assert!(report.contains("replications = 2"), "{report}");
    let hist = std::fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
    let total: f64 = hist.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap()).sum();
    assert_eq!(total, 2.0);
}

#[test]
fn unreliable_score_exits_with_four_and_names_observation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_estimate_config(dir.path(), "unreliable = \"error\"\nescalations = 0\n");
    let csv = write(dir.path(), "obs.csv", "t,y1\n0,0\n25,0.1\n50,80.0\n");
    let o = run(&["estimate", "-c", s(&cfg), "--input", s(&csv), "--out", s(dir.path())]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("report.toml")).unwrap();
    assert!(report.contains("failure_observation = 1"), "{report}");
}

#[test]
fn hurst_on_synthetic_fbm_increments() {
    let dir = tempfile::tempdir().unwrap();
    let grid = TimeGrid::new(1.0, 4096).unwrap();
    let b = simulate_fbm(grid, 1, HurstParam::new(0.6).unwrap(), 17).unwrap();
    let mut text = String::from("x\n");
    for v in b.increments(0) {
        text.push_str(&format!("{v:?}\n"));
    }
    let csv = write(dir.path(), "inc.csv", &text);
    let o = run(&["hurst", "--input", s(&csv), "--column", "x", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: toml::Value = toml::from_str(&std::fs::read_to_string(dir.path().join("hurst.toml")).unwrap()).unwrap();
    let h = report["hurst"].as_float().unwrap();
    assert!((0.5..=0.7).contains(&h), "{h}");
}

#[test]
fn hurst_three_groups_and_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    let grid = TimeGrid::new(1.0, 150).unwrap();
    let b = simulate_fbm(grid, 1, HurstParam::new(0.6).unwrap(), 2).unwrap();
    let mut text = String::from("day,close\n");
    for (k, v) in b.values[0].iter().enumerate().skip(1) {
        text.push_str(&format!("{k},{:?}\n", 100.0 + 10.0 * v));
    }
    let csv = write(dir.path(), "px.csv", &text);
    let cfg = write(
        dir.path(),
        "h.toml",
        &format!("[hurst]\ninput = \"{}\"\ncolumn = \"close\"\ntransform = \"diff\"\ngroups = 3\nmin_window = 8\n", s(&csv)),
    );
    let o = run(&["hurst", "-c", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let groups = std::fs::read_to_string(dir.path().join("hurst_groups.csv")).unwrap();
    assert_eq!(groups.lines().count(), 1 + 3);
    let o = run(&["hurst", "-c", s(&cfg), "--column", "open", "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("available columns: day, close"), "{}", stderr(&o));
}

#[test]
fn rate_study_slope_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(code(&run(&["rate-study", "--seed", "1", "--out", s(&a)])), 0);
    assert_eq!(code(&run(&["--threads", "2", "rate-study", "--seed", "1", "--out", s(&b)])), 0);
    assert_eq!(std::fs::read(a.join("rate.csv")).unwrap(), std::fs::read(b.join("rate.csv")).unwrap());
    let report: toml::Value = toml::from_str(&std::fs::read_to_string(a.join("rate.toml")).unwrap()).unwrap();
    assert!(report["slope"].as_float().unwrap() <= -0.25);
    let cfg = write(dir.path(), "r.toml", "[rate_study]\nsteps = [64]\n");
    let o = run(&["rate-study", "-c", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("slope undefined"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "preset = \"ou\"\n[experiment]\nhurts = 0.6\n");
    let o = run(&["simulate", "-c", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
}
