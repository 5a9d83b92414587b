//! The four subcommands. Each writes its files into the output directory
//! together with a `<command>.meta.toml` sidecar.

use std::path::PathBuf;

use log::{info, warn};
use serde::Serialize;

use fracinfer::estimator::{estimate as fit, replicate_model, EstimationReport};
use fracinfer::fbm::{estimate_hurst_rs_with, simulate_fbm, HurstParam};
use fracinfer::likelihood::{Observations, ScoreEngine, Unreliable};
use fracinfer::models::get_model;
use fracinfer::pathwise::euler_solve;
use fracinfer::rates::{rate_study, RateStudy};
use fracinfer::Error;

use crate::config::{resolve, HurstSection, RateSection, Resolved, RunConfig, Transform};
use crate::io::{csv_text, histogram, to_toml, write_atomic, write_sidecar, Table};
use crate::CliError;

/// Files written by a command and the process exit code it asks for.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub exit_code: i32,
    pub summary: String,
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn nan_if_none(v: &[Option<f64>]) -> Vec<f64> {
    v.iter().map(|x| x.unwrap_or(f64::NAN)).collect()
}

#[derive(Serialize)]
struct SimulateMeta<'a> {
    experiment: &'a Resolved,
    include_fbm: bool,
}

pub fn simulate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let r = resolve(cfg)?;
    let p = &r.preset;
    let model = r.model()?;
    let grid = p.grid()?;
    let b = simulate_fbm(grid, model.d, p.hurst_param()?, cfg.seed)?;
    let y = euler_solve(&model, &p.theta_true, &b, &p.initial)?;
    let step = p.steps / p.observations;
    let mut header = vec!["t".to_string()];
    header.extend(names("y", model.m));
    if cfg.simulate.include_fbm {
        header.extend(names("b", model.d));
    }
    let rows: Vec<Vec<f64>> = (0..=p.observations)
        .map(|i| {
            let k = i * step;
            let mut row = vec![grid.node(k)];
            row.extend_from_slice(y.at(k));
            if cfg.simulate.include_fbm {
                row.extend(b.values.iter().map(|v| v[k]));
            }
            row
        })
        .collect();
    let dir = cfg.output_dir();
    let out = dir.join("observations.csv");
    write_atomic(&out, csv_text(&header, &rows).as_bytes())?;
    let meta = SimulateMeta { experiment: &r, include_fbm: cfg.simulate.include_fbm };
    let side = write_sidecar(&dir, "simulate", cfg.seed, &meta, std::slice::from_ref(&out))?;
    Ok(Outcome {
        summary: format!("{} observations of '{}' written to {}", p.observations, p.model, out.display()),
        outputs: vec![out, side],
        exit_code: 0,
    })
}

/// Observations from a CSV with columns t, y1..ym; a row at t = 0 sets the
/// initial value, otherwise `initial` is used.
pub fn read_observations(path: &std::path::Path, m: usize, initial: &[f64]) -> Result<Observations, CliError> {
    let table = Table::read(path)?;
    let tc = table.column_index("t")?;
    let yc = names("y", m).iter().map(|n| table.column_index(n)).collect::<Result<Vec<_>, _>>()?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut start = initial.to_vec();
    for r in 0..table.rows.len() {
        let t = table.number(r, tc)?;
        let y = yc.iter().map(|&c| table.number(r, c)).collect::<Result<Vec<_>, _>>()?;
        if r == 0 && t == 0.0 {
            start = y;
            continue;
        }
        if times.last().is_some_and(|&last| t <= last) || t <= 0.0 {
            return Err(CliError::Parse(format!(
                "{}: line {}: times must be positive and increasing",
                path.display(),
                table.rows[r].0
            )));
        }
        times.push(t);
        values.push(y);
    }
    Ok(Observations::new(times, values, start)?)
}

#[derive(Serialize)]
struct FitReport {
    estimate: Vec<f64>,
    completed: bool,
    failure: Option<String>,
    failure_observation: Option<usize>,
    iterations: usize,
    retries: usize,
    skipped_total: usize,
    observations: usize,
    steps: usize,
    paths: usize,
    seed: u64,
}

#[derive(Serialize)]
struct ReplicationReport {
    replications: usize,
    completed: usize,
    failures: usize,
    mean: Vec<f64>,
    /// standard deviation of the estimates over replications
    sd: Vec<f64>,
    /// standard error of the mean
    se_mean: Vec<f64>,
    theta_true: Vec<f64>,
    estimates: Vec<Vec<f64>>,
    failure_messages: Vec<String>,
    seed: u64,
}

#[derive(Serialize)]
struct EstimateMeta<'a> {
    experiment: &'a Resolved,
    input: Option<String>,
}

fn failure_index(e: &Error) -> Option<usize> {
    match e {
        Error::UnreliableScore { index, .. } => Some(*index),
        _ => None,
    }
}

fn trace_rows(rep: usize, r: &EstimationReport) -> Vec<Vec<f64>> {
    r.trace
        .iter()
        .enumerate()
        .map(|(k, th)| {
            let mut row = vec![rep as f64, k as f64];
            row.extend(th);
            let q = th.len();
            match k.checked_sub(1).and_then(|j| r.scores.get(j).map(|s| (j, s))) {
                Some((j, s)) => {
                    row.extend(s);
                    row.extend(nan_if_none(&r.score_se[j]));
                    row.push(r.skipped[j] as f64);
                }
                None => row.extend(std::iter::repeat_n(f64::NAN, 2 * q + 1)),
            }
            row
        })
        .collect()
}

fn trace_header(q: usize) -> Vec<String> {
    let mut h = vec!["replication".to_string(), "iteration".to_string()];
    h.extend(names("theta", q));
    h.extend(names("score", q));
    h.extend(names("score_se", q));
    h.push("skipped".into());
    h
}

fn histogram_rows(estimates: &[Vec<f64>], q: usize) -> Vec<Vec<f64>> {
    (0..q)
        .flat_map(|c| {
            let col: Vec<f64> = estimates.iter().map(|e| e[c]).collect();
            histogram(&col).into_iter().map(move |b| vec![(c + 1) as f64, b.lower, b.upper, b.count as f64])
        })
        .collect()
}

fn exit_code_of(e: &Error) -> i32 {
    CliError::Lib(e.clone()).exit_code()
}

pub fn estimate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let r = resolve(cfg)?;
    let p = &r.preset;
    let model = r.model()?;
    let dir = cfg.output_dir();
    let q = model.q;
    let meta = EstimateMeta { experiment: &r, input: cfg.estimate.input.as_ref().map(|i| i.display().to_string()) };
    let mut outputs = Vec::new();
    let (summary, code) = if let Some(input) = &cfg.estimate.input {
        let obs = read_observations(input, model.m, &p.initial)?;
        let ecfg = p.estimator_config(cfg.seed)?;
        let report = fit(&model, &obs, &ecfg)?;
        let failure = report.failure.clone();
        let fr = FitReport {
            estimate: report.estimate.clone(),
            completed: report.completed(),
            failure: failure.as_ref().map(|e| e.to_string()),
            failure_observation: failure.as_ref().and_then(failure_index),
            iterations: report.trace.len() - 1,
            retries: report.retries,
            skipped_total: report.skipped.iter().sum(),
            observations: obs.len(),
            steps: p.steps,
            paths: p.paths,
            seed: cfg.seed,
        };
        let path = dir.join("report.toml");
        write_atomic(&path, to_toml(&fr)?.as_bytes())?;
        outputs.push(path);
        let path = dir.join("trace.csv");
        write_atomic(&path, csv_text(&trace_header(q), &trace_rows(0, &report)).as_bytes())?;
        outputs.push(path);
        let path = dir.join("histogram.csv");
        let hh = ["parameter", "lower", "upper", "count"].map(String::from);
        write_atomic(&path, csv_text(&hh, &histogram_rows(&[report.estimate.clone()], q)).as_bytes())?;
        outputs.push(path);
        // per-observation W_i and V_i at the final estimate
        let engine = ScoreEngine::new(&model, &obs, ecfg.budget, ecfg.engine)?;
        if let Ok(sv) = engine.score_with(&report.estimate, Unreliable::Skip) {
            let mut dh = vec!["observation".to_string(), "t".into(), "w".into(), "w_se".into()];
            dh.extend(names("v", q));
            dh.extend(names("v_se", q));
            dh.extend(["paths".to_string(), "reliable".to_string()]);
            let rows: Vec<Vec<f64>> = sv
                .terms
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let mut row = vec![i as f64, obs.times[i], t.w.value, t.w.se.unwrap_or(f64::NAN)];
                    row.extend(t.v.iter().map(|v| v.value));
                    row.extend(t.v.iter().map(|v| v.se.unwrap_or(f64::NAN)));
                    row.extend([t.paths as f64, if t.reliable() { 1.0 } else { 0.0 }]);
                    row
                })
                .collect();
            let path = dir.join("diagnostics.csv");
            write_atomic(&path, csv_text(&dh, &rows).as_bytes())?;
            outputs.push(path);
        }
        let code = failure.as_ref().map_or(0, exit_code_of);
        let summary = match &failure {
            None => format!("theta_hat = {:?}", report.estimate),
            Some(e) => format!("estimation aborted: {e}"),
        };
        (summary, code)
    } else {
        let s = replicate_model(&model, p, cfg.seed)?;
        let completed = s.estimates.len();
        let se_mean = s.sd.iter().map(|v| v / (completed as f64).sqrt()).collect();
        let failures: Vec<&Error> = s.reports.iter().filter_map(|r| r.failure.as_ref()).collect();
        let rr = ReplicationReport {
            replications: s.reports.len(),
            completed,
            failures: s.failures,
            mean: s.mean.clone(),
            sd: s.sd.clone(),
            se_mean,
            theta_true: p.theta_true.clone(),
            estimates: s.estimates.clone(),
            failure_messages: failures.iter().map(|e| e.to_string()).collect(),
            seed: cfg.seed,
        };
        let path = dir.join("report.toml");
        write_atomic(&path, to_toml(&rr)?.as_bytes())?;
        outputs.push(path);
        let rows: Vec<Vec<f64>> = s.reports.iter().enumerate().flat_map(|(i, r)| trace_rows(i, r)).collect();
        let path = dir.join("trace.csv");
        write_atomic(&path, csv_text(&trace_header(q), &rows).as_bytes())?;
        outputs.push(path);
        let path = dir.join("histogram.csv");
        let hh = ["parameter", "lower", "upper", "count"].map(String::from);
        write_atomic(&path, csv_text(&hh, &histogram_rows(&s.estimates, q)).as_bytes())?;
        outputs.push(path);
        let code = failures.first().map_or(0, |e| exit_code_of(e));
        (format!("mean theta_hat = {:?}, sd = {:?}, failures = {}", s.mean, s.sd, s.failures), code)
    };
    let side = write_sidecar(&dir, "estimate", cfg.seed, &meta, &outputs)?;
    outputs.push(side);
    Ok(Outcome { outputs, exit_code: code, summary })
}

fn transform(series: &[f64], t: Transform) -> Result<Vec<f64>, CliError> {
    Ok(match t {
        Transform::None => series.to_vec(),
        Transform::Diff => series.windows(2).map(|w| w[1] - w[0]).collect(),
        Transform::LogReturns => {
            if series.iter().any(|v| *v <= 0.0) {
                return Err(CliError::Config("log-returns need a positive series".into()));
            }
            series.windows(2).map(|w| (w[1] / w[0]).ln()).collect()
        }
    })
}

#[derive(Serialize)]
struct GroupReport {
    group: usize,
    start: usize,
    length: usize,
    hurst: f64,
    estimate: Option<Vec<f64>>,
    note: Option<String>,
}

#[derive(Serialize)]
struct HurstReport {
    column: String,
    length: usize,
    hurst: f64,
    groups: Vec<GroupReport>,
}

#[derive(Serialize)]
struct HurstMeta<'a> {
    hurst: &'a HurstSection,
    experiment: Option<&'a Resolved>,
}

/// Fit the experiment's model to one group of raw values observed every `dt`.
fn fit_group(r: &Resolved, raw: &[f64], h: f64, dt: f64, seed: u64) -> Result<Vec<f64>, CliError> {
    let mut p = r.preset.clone();
    let n = raw.len() - 1;
    p.hurst = h;
    if p.gamma >= h {
        p.gamma = 0.5 * (0.5 + h);
    }
    p.observations = n;
    p.steps = n * (p.steps / n).max(1);
    p.horizon = n as f64 * dt;
    let model = r.model()?;
    if model.m != 1 {
        return Err(CliError::Config("per-group estimation needs a one-dimensional model".into()));
    }
    let times = (1..=n).map(|k| k as f64 * dt).collect();
    let values = raw[1..].iter().map(|v| vec![*v]).collect();
    let obs = Observations::new(times, values, vec![raw[0]])?;
    let report = fit(&model, &obs, &p.estimator_config(seed)?)?;
    match report.failure {
        None => Ok(report.estimate),
        Some(e) => Err(e.into()),
    }
}

pub fn hurst(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let hs = cfg.hurst.as_ref().ok_or_else(|| CliError::Config("the hurst command needs a [hurst] section".into()))?;
    if hs.groups == 0 {
        return Err(CliError::Config("groups must be at least 1".into()));
    }
    let table = Table::read(&hs.input)?;
    let raw = table.column(&hs.column)?;
    let series = transform(&raw, hs.transform)?;
    let h_all = estimate_hurst_rs_with(&series, &hs.rs())?;
    let resolved = if hs.estimate { Some(resolve(cfg)?) } else { None };
    let len = raw.len() / hs.groups;
    let mut groups = Vec::new();
    for g in 0..hs.groups {
        let start = g * len;
        let end = if g + 1 == hs.groups { raw.len() } else { start + len };
        let part = transform(&raw[start..end], hs.transform)?;
        let h = estimate_hurst_rs_with(&part, &hs.rs())?;
        let mut gr = GroupReport { group: g + 1, start, length: end - start, hurst: h, estimate: None, note: None };
        if let Some(r) = &resolved {
            if HurstParam::new(h).is_err() {
                warn!("group {}: H = {h:.3} outside (1/2, 1), no fit", g + 1);
                gr.note = Some("estimated H outside (1/2, 1)".into());
            } else {
                info!("group {}: fitting '{}' at H = {h:.3}", g + 1, r.preset.model);
                match fit_group(r, &raw[start..end], h, hs.dt, fracinfer::rng::stream_seed(cfg.seed, 3, g as u64)) {
                    Ok(th) => gr.estimate = Some(th),
                    Err(e) => gr.note = Some(e.to_string()),
                }
            }
        }
        groups.push(gr);
    }
    let dir = cfg.output_dir();
    let mut header = vec!["group".to_string(), "start".into(), "length".into(), "hurst".into()];
    let q = groups.iter().find_map(|g| g.estimate.as_ref().map(Vec::len)).unwrap_or(0);
    header.extend(names("theta", q));
    let rows: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| {
            let mut row = vec![g.group as f64, g.start as f64, g.length as f64, g.hurst];
            match &g.estimate {
                Some(e) => row.extend(e),
                None => row.extend(std::iter::repeat_n(f64::NAN, q)),
            }
            row
        })
        .collect();
    let report = HurstReport { column: hs.column.clone(), length: series.len(), hurst: h_all, groups };
    let csv_path = dir.join("hurst_groups.csv");
    write_atomic(&csv_path, csv_text(&header, &rows).as_bytes())?;
    let path = dir.join("hurst.toml");
    write_atomic(&path, to_toml(&report)?.as_bytes())?;
    let outputs = vec![path, csv_path];
    let meta = HurstMeta { hurst: hs, experiment: resolved.as_ref() };
    let side = write_sidecar(&dir, "hurst", cfg.seed, &meta, &outputs)?;
    let summary = format!(
        "H = {h_all:.4}; groups: {:?}",
        report.groups.iter().map(|g| (g.hurst * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
    Ok(Outcome { outputs: vec![outputs[0].clone(), outputs[1].clone(), side], exit_code: 0, summary })
}

pub fn run_rate_study(rs: &RateSection, seed: u64) -> Result<RateStudy, CliError> {
    let model = get_model(&rs.model, &rs.theta)?;
    let initial = rs.initial.clone().unwrap_or_else(|| vec![0.0; model.m]);
    let h = HurstParam::new(rs.hurst).map_err(|e| CliError::Config(e.to_string()))?;
    Ok(rate_study(&model, &rs.theta, &initial, h, rs.horizon, &rs.steps, rs.reference, rs.paths, rs.target, seed)?)
}

pub fn rate(cfg: &RunConfig) -> Result<Outcome, CliError> {
    let study = run_rate_study(&cfg.rate_study, cfg.seed)?;
    let dir = cfg.output_dir();
    let rows: Vec<Vec<f64>> = study.steps.iter().zip(&study.errors).map(|(&m, &e)| vec![m as f64, e]).collect();
    let path = dir.join("rate.csv");
    write_atomic(&path, csv_text(&["M".to_string(), "error".to_string()], &rows).as_bytes())?;
    let rpath = dir.join("rate.toml");
    write_atomic(&rpath, to_toml(&study)?.as_bytes())?;
    let outputs = vec![path, rpath];
    let side = write_sidecar(&dir, "rate-study", cfg.seed, &cfg.rate_study, &outputs)?;
    Ok(Outcome {
        summary: format!("slope {:.4} over M = {:?}", study.slope, study.steps),
        outputs: vec![outputs[0].clone(), outputs[1].clone(), side],
        exit_code: 0,
    })
}
