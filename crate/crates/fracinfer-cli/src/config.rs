//! Run configuration read from TOML and resolved into library settings.
//!
//! ```toml
//! seed = 7
//! output = "out"
//! preset = "ou"            # optional base for [experiment]
//!
//! [experiment]             # every key optional when a preset is given
//! model = "fou"            # or model_file = "model.toml"
//! theta_true = [0.5]
//! theta0 = [0.7]
//! lower = [0.01]
//! upper = [10.0]
//! initial = [0.0]
//! hurst = 0.6
//! horizon = 250.0
//! observations = 50
//! steps = 500              # Euler steps over [0, T]
//! paths = 500              # or "auto"
//! gamma = 0.55
//! budget_c = 1.0
//! n_max = 1000000
//! iterations = 50
//! replications = 20
//! schedule = { a0 = [0.08], offset = 10.0, rho = 1.0 }
//! tail = "auto"            # or "upper"
//! escalations = 3
//! unreliable = "skip"      # or "error"
//!
//! [simulate]
//! include_fbm = false
//!
//! [estimate]
//! input = "observations.csv"   # absent: replications on simulated data
//!
//! [hurst]
//! input = "prices.csv"
//! column = "close"
//! transform = "log-returns"    # "none", "diff" or "log-returns"
//! groups = 3
//! min_window = 16
//! max_fraction = 0.25
//! correction = "anis-lloyd"    # or "none"
//! estimate = false             # fit [experiment] per group at its Ĥ
//! dt = 1.0
//!
//! [rate_study]
//! model = "fou"
//! theta = [0.5]
//! initial = [0.0]
//! hurst = 0.75
//! horizon = 1.0
//! steps = [16, 32, 64, 128, 256, 512]
//! reference = 4096
//! paths = 100
//! target = "euler"             # or "derivative"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fracinfer::estimator::{preset, validate_schedule, Preset, StepSchedule};
use fracinfer::fbm::{HurstParam, RsConfig, RsCorrection};
use fracinfer::likelihood::{allocate_budget, BudgetRule, TailSide, Unreliable};
use fracinfer::models::{get_model, ModelFile, ModelSpec};
use fracinfer::rates::RateTarget;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub preset: Option<String>,
    #[serde(default)]
    pub experiment: Experiment,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    pub hurst: Option<HurstSection>,
    #[serde(default)]
    pub rate_study: RateSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Paths {
    Count(usize),
    Rule(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub model: Option<String>,
    pub model_file: Option<PathBuf>,
    pub theta_true: Option<Vec<f64>>,
    pub theta0: Option<Vec<f64>>,
    pub lower: Option<Vec<f64>>,
    pub upper: Option<Vec<f64>>,
    pub initial: Option<Vec<f64>>,
    pub hurst: Option<f64>,
    pub horizon: Option<f64>,
    pub observations: Option<usize>,
    pub steps: Option<usize>,
    pub paths: Option<Paths>,
    pub gamma: Option<f64>,
    pub budget_c: Option<f64>,
    pub n_max: Option<usize>,
    pub iterations: Option<usize>,
    pub replications: Option<usize>,
    pub schedule: Option<StepSchedule>,
    pub tail: Option<TailSide>,
    pub escalations: Option<u32>,
    pub unreliable: Option<Unreliable>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default)]
    pub include_fbm: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    #[default]
    None,
    Diff,
    LogReturns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HurstSection {
    pub input: PathBuf,
    pub column: String,
    #[serde(default)]
    pub transform: Transform,
    #[serde(default = "one")]
    pub groups: usize,
    #[serde(default = "default_min_window")]
    pub min_window: usize,
    #[serde(default = "default_max_fraction")]
    pub max_fraction: f64,
    #[serde(default = "default_correction")]
    pub correction: RsCorrection,
    #[serde(default)]
    pub estimate: bool,
    #[serde(default = "unit")]
    pub dt: f64,
}

fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}
fn default_min_window() -> usize {
    RsConfig::default().min_window
}
fn default_max_fraction() -> f64 {
    RsConfig::default().max_fraction
}
fn default_correction() -> RsCorrection {
    RsConfig::default().correction
}

impl HurstSection {
    pub fn rs(&self) -> RsConfig {
        RsConfig { min_window: self.min_window, max_fraction: self.max_fraction, correction: self.correction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    #[serde(default = "fou")]
    pub model: String,
    #[serde(default = "half")]
    pub theta: Vec<f64>,
    pub initial: Option<Vec<f64>>,
    #[serde(default = "rate_hurst")]
    pub hurst: f64,
    #[serde(default = "unit")]
    pub horizon: f64,
    #[serde(default = "rate_steps")]
    pub steps: Vec<usize>,
    #[serde(default = "rate_reference")]
    pub reference: usize,
    #[serde(default = "rate_paths")]
    pub paths: usize,
    #[serde(default)]
    pub target: RateTarget,
}

fn fou() -> String {
    "fou".into()
}
fn half() -> Vec<f64> {
    vec![0.5]
}
fn rate_hurst() -> f64 {
    0.75
}
fn rate_steps() -> Vec<usize> {
    (4..=9).map(|k| 1 << k).collect()
}
fn rate_reference() -> usize {
    1 << 12
}
fn rate_paths() -> usize {
    100
}

impl Default for RateSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // relative paths inside the file are taken relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.experiment.model_file.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.estimate.input.as_mut() {
            fix(p);
        }
        if let Some(h) = cfg.hurst.as_mut() {
            fix(&mut h.input);
        }
        if let Some(p) = cfg.output.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output.clone().unwrap_or_else(|| PathBuf::from("."))
    }
}

/// The experiment with every setting filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub preset: Preset,
    pub model_file: Option<ModelFile>,
    pub paths_capped: bool,
}

impl Resolved {
    pub fn model(&self) -> Result<ModelSpec, CliError> {
        Ok(match &self.model_file {
            Some(f) => ModelSpec::from_file(f, self.preset.theta_true.clone())?,
            None => get_model(&self.preset.model, &self.preset.theta_true)?,
        })
    }
}

fn need<T>(v: Option<T>, key: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Config(format!("[experiment] {key} is required without a preset")))
}

pub fn resolve(cfg: &RunConfig) -> Result<Resolved, CliError> {
    let e = &cfg.experiment;
    let model_file = match &e.model_file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|err| CliError::Config(format!("{}: {err}", p.display())))?;
            Some(toml::from_str::<ModelFile>(&text).map_err(|err| CliError::Config(format!("{}: {err}", p.display())))?)
        }
        None => None,
    };
    let mut p = match &cfg.preset {
        Some(name) => preset(name)?,
        None => {
            let model = match (&e.model, &model_file) {
                (Some(m), _) => m.clone(),
                (None, Some(f)) => f.name.clone(),
                (None, None) => return Err(CliError::Config("[experiment] needs model or model_file without a preset".into())),
            };
            let theta = need(e.theta_true.clone(), "theta_true")?;
            Preset {
                name: "custom".into(),
                model,
                theta0: theta.clone(),
                theta_true: theta,
                lower: need(e.lower.clone(), "lower")?,
                upper: need(e.upper.clone(), "upper")?,
                initial: vec![],
                hurst: need(e.hurst, "hurst")?,
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
                unreliable: Unreliable::Error,
            }
        }
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = &e.$f { p.$f = v.clone(); } )* };
    }
    set!(model, theta_true, theta0, lower, upper, initial, hurst, horizon, observations, steps, gamma, iterations, replications, schedule, tail, escalations, unreliable);
    if let Some(f) = &model_file {
        p.model = f.name.clone();
    }
    let spec = match &model_file {
        Some(f) => ModelSpec::from_file(f, p.theta_true.clone())?,
        None => get_model(&p.model, &p.theta_true)?,
    };
    if p.initial.is_empty() {
        p.initial = vec![0.0; spec.m];
    }
    let h = HurstParam::new(p.hurst).map_err(|err| CliError::Config(err.to_string()))?;
    if !(p.gamma < h.value()) {
        return Err(CliError::Config(format!("gamma = {} must be below h = {}", p.gamma, p.hurst)));
    }
    validate_schedule(&p.schedule).map_err(CliError::Config)?;
    if p.observations == 0 || p.steps % p.observations != 0 {
        return Err(CliError::Config(format!(
            "steps M = {} must be a positive multiple of the number of observations n = {}",
            p.steps, p.observations
        )));
    }
    if p.theta0.len() != spec.q || p.lower.len() != spec.q || p.upper.len() != spec.q || p.initial.len() != spec.m {
        return Err(CliError::Config(format!(
            "model '{}' has q = {} parameters and m = {} states; check theta0, lower, upper and initial",
            p.model, spec.q, spec.m
        )));
    }
    let mut capped = false;
    match &e.paths {
        None => {}
        Some(Paths::Count(n)) => p.paths = *n,
        Some(Paths::Rule(s)) if s == "auto" => {
            let rule = BudgetRule { c: e.budget_c.unwrap_or(1.0), n_max: e.n_max.unwrap_or(BudgetRule::default().n_max) };
            let a = allocate_budget(p.steps, p.gamma, p.horizon, spec.m, spec.d, rule)?;
            p.paths = a.paths;
            capped = a.capped;
        }
        Some(Paths::Rule(s)) => return Err(CliError::Config(format!("paths must be a count or \"auto\", got \"{s}\""))),
    }
    p.estimator_config(0)?;
    Ok(Resolved { preset: p, model_file, paths_capped: capped })
}
