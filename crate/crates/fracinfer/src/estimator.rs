//! Robbins-Monro root finding for the score equation.

use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::{simulate_fbm, HurstParam, TimeGrid};
use crate::likelihood::{Budget, EngineConfig, Observations, ScoreEngine, TailSide, Unreliable};
use crate::models::{get_model, ModelSpec};
use crate::pathwise::euler_solve;
use crate::rng::stream_seed;
use crate::stats::{mean, std_dev};

/// a_k = a₀ / (b + k)^ρ for k = 1, 2, …; `a0` holds one value per coordinate
/// or a single value for all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub a0: Vec<f64>,
    pub offset: f64,
    pub rho: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule { a0: vec![1.0], offset: 10.0, rho: 1.0 }
    }
}

impl StepSchedule {
    pub fn new(a0: Vec<f64>, offset: f64, rho: f64) -> Result<Self> {
        let s = StepSchedule { a0, offset, rho };
        validate_schedule(&s).map_err(Error::Argument)?;
        Ok(s)
    }

    pub fn step(&self, k: usize, coord: usize) -> f64 {
        let a0 = if self.a0.len() == 1 { self.a0[0] } else { self.a0[coord] };
        a0 / (self.offset + k as f64).powf(self.rho)
    }
}

/// Ok iff every a₀ > 0, b ≥ 0 and ρ ∈ (1/2, 1].
pub fn validate_schedule(s: &StepSchedule) -> std::result::Result<(), String> {
    if s.a0.is_empty() || s.a0.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(format!("step sizes must be positive: a0 = {:?}", s.a0));
    }
    if !(s.offset >= 0.0) || !s.offset.is_finite() {
        return Err(format!("offset must be non-negative, got {}", s.offset));
    }
    if !(s.rho > 0.5 && s.rho <= 1.0) {
        let why = if s.rho <= 0.5 { "the squared steps are not summable" } else { "the steps are summable" };
        return Err(format!("exponent ρ = {} outside (1/2, 1]: {why}", s.rho));
    }
    Ok(())
}

/// Coordinate-wise box Θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.iter().zip(&upper).any(|(a, b)| !(a < b)) {
            return Err(Error::Argument(format!("invalid box {lower:?} .. {upper:?}")));
        }
        Ok(Bounds { lower, upper })
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.lower.len() && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, (a, b)) in x.iter_mut().zip(self.lower.iter().zip(&self.upper)) {
            *v = v.clamp(*a, *b);
        }
    }
}

/// One evaluation of the root function g (the iteration moves against g).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEval {
    pub value: Vec<f64>,
    pub se: Vec<Option<f64>>,
    pub skipped: usize,
}

impl ScoreEval {
    pub fn exact(value: Vec<f64>) -> Self {
        let se = vec![None; value.len()];
        ScoreEval { value, se, skipped: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationReport {
    /// θ̂_0, …, θ̂_K (shorter if the run aborted)
    pub trace: Vec<Vec<f64>>,
    pub estimate: Vec<f64>,
    pub scores: Vec<Vec<f64>>,
    pub score_se: Vec<Vec<Option<f64>>>,
    pub skipped: Vec<usize>,
    pub retries: usize,
    pub failure: Option<Error>,
    pub iterations: usize,
    pub wall_clock: f64,
    pub seed: u64,
}

impl EstimationReport {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }
}

/// Mean of the last ⌈len/5⌉ entries (at least one).
pub fn tail_average(trace: &[Vec<f64>]) -> Vec<f64> {
    let k = trace.len().saturating_sub(1).max(1);
    let take = k.div_ceil(5).min(trace.len());
    let tail = &trace[trace.len() - take..];
    (0..tail[0].len()).map(|c| mean(&tail.iter().map(|t| t[c]).collect::<Vec<_>>())).collect()
}

/// θ_{k+1} = Π_Θ(θ_k - a_k g(θ_k)). `g` receives `true` when the step is a
/// retry after a failed evaluation and should then use fresh random numbers.
pub fn robbins_monro<F>(mut g: F, theta0: &[f64], schedule: &StepSchedule, iterations: usize, bounds: &Bounds) -> Result<EstimationReport>
where
    F: FnMut(&[f64], usize, bool) -> Result<ScoreEval>,
{
    validate_schedule(schedule).map_err(Error::Argument)?;
    if iterations < 1 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    if schedule.a0.len() != 1 && schedule.a0.len() != theta0.len() {
        return Err(Error::Argument("a0 needs one entry or one per coordinate".into()));
    }
    if !bounds.contains(theta0) {
        return Err(Error::Argument(format!("θ0 = {theta0:?} outside the parameter box")));
    }
    let start = Instant::now();
    let mut report = EstimationReport {
        trace: vec![theta0.to_vec()],
        estimate: theta0.to_vec(),
        scores: vec![],
        score_se: vec![],
        skipped: vec![],
        retries: 0,
        failure: None,
        iterations,
        wall_clock: 0.0,
        seed: 0,
    };
    let mut theta = theta0.to_vec();
    for k in 1..=iterations {
        let eval = match g(&theta, k, false) {
            Ok(e) if e.value.iter().all(|v| v.is_finite()) => Ok(e),
            first => {
                let why = first.err().unwrap_or_else(|| Error::Degenerate("non-finite score".into()));
                warn!("score failed at iterate {k} ({why}); retrying with fresh paths");
                report.retries += 1;
                match g(&theta, k, true) {
                    Ok(e) if e.value.iter().all(|v| v.is_finite()) => Ok(e),
                    Ok(_) => Err(Error::Degenerate(format!("non-finite score at iterate {k}"))),
                    Err(e) => Err(e),
                }
            }
        };
        let eval = match eval {
            Ok(e) => e,
            Err(e) => {
                report.failure = Some(e);
                break;
            }
        };
        if eval.value.len() != theta.len() {
            return Err(Error::Argument("score dimension differs from θ".into()));
        }
        for (c, v) in theta.iter_mut().enumerate() {
            *v -= schedule.step(k, c) * eval.value[c];
        }
        bounds.project(&mut theta);
        report.scores.push(eval.value);
        report.score_se.push(eval.se);
        report.skipped.push(eval.skipped);
        report.trace.push(theta.clone());
    }
    report.estimate = tail_average(&report.trace);
    bounds.project(&mut report.estimate);
    report.wall_clock = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Everything needed to fit one data set.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub theta0: Vec<f64>,
    pub bounds: Bounds,
    pub schedule: StepSchedule,
    pub iterations: usize,
    pub budget: Budget,
    pub engine: EngineConfig,
    pub unreliable: Unreliable,
}

/// Robbins-Monro on the score of `obs`; the iteration moves along +∇ℓ.
pub fn estimate(model: &ModelSpec, obs: &Observations, cfg: &EstimatorConfig) -> Result<EstimationReport> {
    let engine = ScoreEngine::new(model, obs, cfg.budget, cfg.engine)?;
    let mut report = robbins_monro(
        |theta, k, retry| {
            let sv = if retry {
                engine.reseeded(stream_seed(cfg.engine.seed, 0x7e7, k as u64))?.score_with(theta, cfg.unreliable)?
            } else {
                engine.score_with(theta, cfg.unreliable)?
            };
            if !sv.skipped.is_empty() {
                info!("iterate {k}: {} unreliable observations left out", sv.skipped.len());
            }
            Ok(ScoreEval {
                value: sv.score.iter().map(|s| -s).collect(),
                se: sv.se,
                skipped: sv.skipped.len(),
            })
        },
        &cfg.theta0,
        &cfg.schedule,
        cfg.iterations,
        &cfg.bounds,
    )?;
    report.seed = cfg.engine.seed;
    // report the score itself, not the negated root function
    for s in report.scores.iter_mut() {
        s.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(report)
}

/// Euler path of the model on `grid`, observed at n equally spaced nodes.
pub fn simulate_observations(
    model: &ModelSpec,
    theta: &[f64],
    initial: &[f64],
    hurst: HurstParam,
    grid: TimeGrid,
    n: usize,
    seed: u64,
) -> Result<Observations> {
    let m = grid.steps();
    if n == 0 || m % n != 0 {
        return Err(Error::Argument(format!("M = {m} must be a positive multiple of n = {n}")));
    }
    let b = simulate_fbm(grid, model.d, hurst, seed)?;
    let y = euler_solve(model, theta, &b, initial)?;
    let step = m / n;
    let times = (1..=n).map(|i| grid.node(i * step)).collect();
    let values = (1..=n).map(|i| y.at(i * step).to_vec()).collect();
    Observations::new(times, values, initial.to_vec())
}

/// A reproduction experiment: simulate R data sets at θ_true and fit each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub model: String,
    pub theta_true: Vec<f64>,
    pub theta0: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub initial: Vec<f64>,
    pub hurst: f64,
    pub horizon: f64,
    pub observations: usize,
    pub steps: usize,
    pub paths: usize,
    pub gamma: f64,
    pub iterations: usize,
    pub replications: usize,
    pub schedule: StepSchedule,
    pub tail: TailSide,
    pub escalations: u32,
    pub unreliable: Unreliable,
}

pub const PRESET_NAMES: &[&str] = &["ou", "ou-fast", "linear2d"];

pub fn preset(name: &str) -> Result<Preset> {
    let base = |model: &str, theta: Vec<f64>| Preset {
        name: name.to_string(),
        model: model.to_string(),
        theta0: theta.clone(),
        theta_true: theta,
        lower: vec![0.01],
        upper: vec![10.0],
        initial: vec![0.0],
        hurst: 0.6,
        horizon: 1.0,
        observations: 50,
        steps: 500,
        paths: 500,
        gamma: 0.55,
        iterations: 50,
        replications: 20,
        schedule: StepSchedule::default(),
        tail: TailSide::Auto,
        escalations: 3,
        unreliable: Unreliable::Skip,
    };
    Ok(match name {
        "ou" => Preset {
            theta0: vec![0.7],
            horizon: 250.0,
            schedule: StepSchedule { a0: vec![0.08], offset: 10.0, rho: 1.0 },
            ..base("fou", vec![0.5])
        },
        "ou-fast" => Preset {
            theta0: vec![5.6],
            horizon: 31.25,
            schedule: StepSchedule { a0: vec![5.12], offset: 10.0, rho: 1.0 },
            ..base("fou", vec![4.0])
        },
        "linear2d" => Preset {
            theta0: vec![1.8, 3.7],
            lower: vec![0.1, 0.1],
            upper: vec![10.0, 10.0],
            initial: vec![50.0, 50.0],
            horizon: 0.25,
            schedule: StepSchedule { a0: vec![0.0015, 0.001], offset: 10.0, rho: 1.0 },
            ..base("linear2d", vec![2.0, 4.0])
        },
        other => return Err(Error::Argument(format!("unknown preset '{other}' (known: {PRESET_NAMES:?})"))),
    })
}

impl Preset {
    pub fn hurst_param(&self) -> Result<HurstParam> {
        HurstParam::new(self.hurst)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        get_model(&self.model, &self.theta_true)
    }

    pub fn estimator_config(&self, mc_seed: u64) -> Result<EstimatorConfig> {
        let hurst = self.hurst_param()?;
        Ok(EstimatorConfig {
            theta0: self.theta0.clone(),
            bounds: Bounds::new(self.lower.clone(), self.upper.clone())?,
            schedule: StepSchedule::new(self.schedule.a0.clone(), self.schedule.offset, self.schedule.rho)?,
            iterations: self.iterations,
            budget: Budget::new(self.steps, self.paths, self.gamma, hurst)?,
            engine: EngineConfig { hurst, seed: mc_seed, tail: self.tail, escalations: self.escalations },
            unreliable: self.unreliable,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationSummary {
    pub reports: Vec<EstimationReport>,
    /// estimates of the completed replications
    pub estimates: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub failures: usize,
}

/// R independent replications, each with fresh data and fresh Monte-Carlo seed.
pub fn replicate(p: &Preset, seed: u64) -> Result<ReplicationSummary> {
    replicate_model(&p.model_spec()?, p, seed)
}

/// As `replicate`, for a model not in the built-in table.
pub fn replicate_model(model: &ModelSpec, p: &Preset, seed: u64) -> Result<ReplicationSummary> {
    let grid = p.grid()?;
    let hurst = p.hurst_param()?;
    p.estimator_config(0)?;
    let reports = (0..p.replications)
        .into_par_iter()
        .map(|r| {
            let obs = simulate_observations(model, &p.theta_true, &p.initial, hurst, grid, p.observations, stream_seed(seed, 1, r as u64))?;
            let cfg = p.estimator_config(stream_seed(seed, 2, r as u64))?;
            estimate(model, &obs, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(reports))
}

pub fn summarize(reports: Vec<EstimationReport>) -> ReplicationSummary {
    let estimates: Vec<Vec<f64>> = reports.iter().filter(|r| r.completed()).map(|r| r.estimate.clone()).collect();
    let failures = reports.len() - estimates.len();
    let q = reports.first().map_or(0, |r| r.estimate.len());
    let col = |c: usize| estimates.iter().map(|e| e[c]).collect::<Vec<_>>();
    let mean_v = (0..q).map(|c| mean(&col(c))).collect();
    let sd = (0..q).map(|c| if estimates.len() > 1 { std_dev(&col(c)) } else { f64::NAN }).collect();
    ReplicationSummary { reports, estimates, mean: mean_v, sd, failures }
}
