//! Monte-Carlo estimation of densities, of the score terms W_i and V_i, and
//! of the Euler/Monte-Carlo budget.
//!
//! Every (observation i, path k) pair draws its driving noise from the stream
//! `stream_seed(seed, i, k)`, so all estimates at different θ share their
//! random numbers. Path results are collected in index order and reduced by
//! pairwise summation, which makes every estimate independent of the number
//! of worker threads.

use std::sync::{Arc, OnceLock};

use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fbm::{CellCovariance, FbmGenerator, FbmPath, HurstParam, TimeGrid};
use crate::malliavin::weights::{flat_kernel, scalar_weights, weight_poly};
use crate::malliavin::{derivative_first, grad_derivative_first, theta_gradient, gaussian_kernels};
use crate::malliavin::{GaussianKernels, WeightPoly};
use crate::models::{ModelClass, ModelSpec};
use crate::pathwise::euler_solve;
use crate::rng::stream_seed;
use crate::stats::{covariance, mean_se, pairwise_sum, quantile};

/// Discrete observations y_{t_1}, …, y_{t_n} of a process started at `initial`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
}

impl Observations {
    pub fn new(times: Vec<f64>, values: Vec<Vec<f64>>, initial: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Argument("at least one observation is required".into()));
        }
        if times.len() != values.len() {
            return Err(Error::Argument(format!("{} times but {} values", times.len(), values.len())));
        }
        if !(times[0] > 0.0) || times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Argument("observation times must be positive and strictly increasing".into()));
        }
        let m = initial.len();
        if m == 0 || values.iter().any(|v| v.len() != m) {
            return Err(Error::Argument("observation dimension mismatch".into()));
        }
        if values.iter().flatten().chain(&initial).any(|v| !v.is_finite()) {
            return Err(Error::Argument("observations must be finite".into()));
        }
        Ok(Observations { times, values, initial })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.initial.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }
}

/// `steps` counts Euler steps over [0, t_n]; `paths` is N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub steps: usize,
    pub paths: usize,
    pub gamma: f64,
}

impl Budget {
    pub fn new(steps: usize, paths: usize, gamma: f64, h: HurstParam) -> Result<Self> {
        if steps < 2 || paths < 1 {
            return Err(Error::Argument(format!("need M >= 2 and N >= 1, got M={steps}, N={paths}")));
        }
        if !(gamma > 0.5 && gamma < h.value()) {
            return Err(Error::Argument(format!("Hölder exponent {gamma} outside (1/2, {})", h.value())));
        }
        Ok(Budget { steps, paths, gamma })
    }
}

/// Which side of x the indicator looks at. `Upper` is 1(F > x); `Auto` picks,
/// per coordinate, the side of x holding fewer samples, using
/// E[1(F > x) H] = -E[1(F < x) H] coordinate-wise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TailSide {
    Upper,
    #[default]
    Auto,
}

/// f(x) = E[1(F>x) H_(1..m)] or f(x) = E[(F-x)_+ H_(1..m,1..m)].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DensityRelation {
    #[default]
    Indicator,
    PositivePart,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub hurst: HurstParam,
    pub seed: u64,
    pub tail: TailSide,
    /// How many times an observation whose Ŵ fails the reliability test may
    /// be re-estimated on a four times larger (nested) path set.
    pub escalations: u32,
}

impl EngineConfig {
    pub fn new(hurst: HurstParam, seed: u64) -> Self {
        EngineConfig { hurst, seed, tail: TailSide::Upper, escalations: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: Option<f64>,
}

/// Ŵ_i, V̂_i and what the delta method needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTerms {
    pub w: Estimate,
    pub v: Vec<Estimate>,
    /// Cov(V̂_i^l, Ŵ_i) of the means
    pub cov_vw: Vec<f64>,
    pub paths: usize,
    /// +1 for upper, -1 for lower, per coordinate
    pub side: Vec<i8>,
}

impl ObservationTerms {
    pub fn ratio(&self, l: usize) -> f64 {
        self.v[l].value / self.w.value
    }

    /// Delta-method variance of V̂/Ŵ.
    pub fn ratio_var(&self, l: usize) -> Option<f64> {
        let (sw, sv) = (self.w.se?, self.v[l].se?);
        let r = self.ratio(l);
        let w = self.w.value;
        Some(((sv * sv - 2.0 * r * self.cov_vw[l] + r * r * sw * sw) / (w * w)).max(0.0))
    }

    pub fn reliable(&self) -> bool {
        let w = self.w.value;
        w > W_FLOOR && self.w.se.map_or(true, |se| w > 3.0 * se)
    }
}

pub const W_FLOOR: f64 = 1e-8;

/// Largest number of cached increments per observation.
const CACHE_LIMIT: usize = 1 << 22;
const CHUNK: usize = 4096;
const SHARED_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreValue {
    pub terms: Vec<ObservationTerms>,
    pub score: Vec<f64>,
    pub se: Vec<Option<f64>>,
    /// observations left out of the sum under `Unreliable::Skip`
    pub skipped: Vec<usize>,
}

/// What `score_with` does with an observation whose Ŵ fails the reliability test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unreliable {
    #[default]
    Error,
    Skip,
}

/// Per-path ingredients at one observation node.
#[derive(Debug, Clone, Default)]
struct PathTerms {
    y: Vec<f64>,
    /// q × m
    gy: Vec<f64>,
    /// H_(1..m)
    hw: f64,
    /// H_(1..m,1..m)
    hv: f64,
    /// ∇_l H_(1..m,1..m)
    ghv: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Need {
    Indicator,
    PositivePart,
    Score,
}

/// Deterministic kernels of a linear-additive model at one node: Y_t and
/// ∇Y_t are affine in the increments and the weights are polynomials in X.
struct LinearNode {
    y0: Vec<f64>,
    gy0: Vec<f64>,
    dk: Vec<Vec<f64>>,
    gdk: Vec<Vec<f64>>,
    kern: GaussianKernels,
    pw: WeightPoly,
    pv: Option<WeightPoly>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Monte-Carlo evaluator bound to one model, data set and seed.
pub struct ScoreEngine {
    model: ModelSpec,
    obs: Observations,
    budget: Budget,
    cfg: EngineConfig,
    grid: TimeGrid,
    nodes: Vec<usize>,
    cov: CellCovariance,
    generators: Vec<FbmGenerator>,
    full: FbmGenerator,
    cache: Vec<OnceLock<Arc<Vec<Vec<f64>>>>>,
}

impl ScoreEngine {
    pub fn new(model: &ModelSpec, obs: &Observations, budget: Budget, cfg: EngineConfig) -> Result<Self> {
        if obs.dim() != model.m {
            return Err(Error::Argument(format!("observations have dimension {}, model {}", obs.dim(), model.m)));
        }
        if !(budget.gamma < cfg.hurst.value()) {
            return Err(Error::Argument("Hölder exponent must be below H".into()));
        }
        let grid = TimeGrid::new(obs.horizon(), budget.steps)?;
        let nodes = obs
            .times
            .iter()
            .map(|&t| {
                grid.node_index(t).filter(|&k| k > 0).ok_or_else(|| {
                    Error::Argument(format!(
                        "observation time {t} is not a node of the grid with {} steps over [0, {}]",
                        budget.steps,
                        obs.horizon()
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let generators = nodes
            .iter()
            .map(|&k| FbmGenerator::new(grid.prefix(k)?, cfg.hurst))
            .collect::<Result<Vec<_>>>()?;
        let full = FbmGenerator::new(grid, cfg.hurst)?;
        let cov = CellCovariance::new(&grid, cfg.hurst);
        let cache = (0..nodes.len()).map(|_| OnceLock::new()).collect();
        Ok(ScoreEngine { model: model.clone(), obs: obs.clone(), budget, cfg, grid, nodes, cov, generators, full, cache })
    }

    pub fn observations(&self) -> &Observations {
        &self.obs
    }

    pub fn budget(&self) -> Budget {
        self.budget
    }

    pub fn config(&self) -> EngineConfig {
        self.cfg
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    /// Same data and budget under a different seed.
    pub fn reseeded(&self, seed: u64) -> Result<Self> {
        ScoreEngine::new(&self.model, &self.obs, self.budget, EngineConfig { seed, ..self.cfg })
    }

    fn stream_incs(&self, i: usize, k: usize) -> Vec<Vec<f64>> {
        self.generators[i].increments(self.model.d, stream_seed(self.cfg.seed, i as u64, k as u64))
    }

    fn cacheable(&self, i: usize) -> bool {
        self.budget.paths * self.nodes[i] * self.model.d <= CACHE_LIMIT
    }

    fn base_paths(&self, i: usize) -> Arc<Vec<Vec<f64>>> {
        self.cache[i]
            .get_or_init(|| {
                let n = self.budget.paths;
                Arc::new((0..n).into_par_iter().map(|k| self.stream_incs(i, k).concat()).collect())
            })
            .clone()
    }

    /// Flattened increments of the paths in `range` for observation i.
    fn paths(&self, i: usize, range: std::ops::Range<usize>) -> Vec<Vec<f64>> {
        if !self.cacheable(i) {
            return range.into_par_iter().map(|k| self.stream_incs(i, k).concat()).collect();
        }
        let base = self.base_paths(i);
        range
            .into_par_iter()
            .map(|k| if k < base.len() { base[k].clone() } else { self.stream_incs(i, k).concat() })
            .collect()
    }

    fn fbm_of(&self, i: usize, flat: &[f64]) -> FbmPath {
        let k = self.nodes[i];
        let incs: Vec<Vec<f64>> = flat.chunks(k).map(|c| c.to_vec()).collect();
        FbmPath::from_increments(self.generators[i].grid(), self.cfg.hurst, 0, &incs)
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.model.q || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("θ must be {} finite numbers", self.model.q)));
        }
        Ok(())
    }

    fn linear_nodes(&self, theta: &[f64], need: Need, which: &[usize]) -> Result<Vec<LinearNode>> {
        let (m, d, q) = (self.model.m, self.model.d, self.model.q);
        let nmax = which.iter().map(|&i| self.nodes[i]).max().unwrap();
        let grid = self.grid.prefix(nmax)?;
        let zero = FbmPath::from_increments(grid, self.cfg.hurst, 0, &vec![vec![0.0; nmax]; d]);
        let y = euler_solve(&self.model, theta, &zero, &self.obs.initial)?;
        let d1 = derivative_first(&self.model, theta, &zero, &y)?;
        let with_grad = need == Need::Score;
        let (gy, gd1) = if with_grad {
            let gy = theta_gradient(&self.model, theta, &zero, &y)?;
            let gd = grad_derivative_first(&self.model, theta, &zero, &y, &gy, &d1)?;
            (gy, gd)
        } else {
            (vec![], vec![])
        };
        let tuple_w: Vec<usize> = (0..m).collect();
        let tuple_v: Vec<usize> = (0..2 * m).map(|p| p % m).collect();
        which
            .par_iter()
            .map(|&i| {
                let t = self.nodes[i];
                let kern = gaussian_kernels(&d1, if with_grad { Some(&gd1) } else { None }, &self.cov, t)
                    .map_err(|e| at_observation(e, i))?;
                let pw = weight_poly(&kern, &tuple_w)?;
                let pv = if need == Need::Indicator { None } else { Some(weight_poly(&kern, &tuple_v)?) };
                let dk = (0..m).map(|c| flat_kernel(&d1, c, t)).collect();
                let mut gdk = Vec::new();
                let mut gy0 = Vec::new();
                for l in 0..gd1.len() {
                    for c in 0..m {
                        gdk.push(flat_kernel(&gd1[l], c, t));
                        gy0.push(gy[l].at(t)[c]);
                    }
                }
                debug_assert!(gy0.len() == if with_grad { q * m } else { 0 });
                Ok(LinearNode { y0: y.at(t).to_vec(), gy0, dk, gdk, kern, pw, pv })
            })
            .collect()
    }

    fn linear_path(&self, node: &LinearNode, flat: &[f64], need: Need) -> PathTerms {
        let m = self.model.m;
        let dy: Vec<f64> = node.dk.iter().map(|k| dot(k, flat)).collect();
        // X = η (Y - y0) since hᵖ = Σ_i η^{pi} D Y^i
        let eta = &node.kern.eta;
        let x: Vec<f64> = (0..m).map(|p| dot(&eta[p * m..(p + 1) * m], &dy)).collect();
        let y = node.y0.iter().zip(&dy).map(|(a, b)| a + b).collect();
        let mut out = PathTerms { y, hw: node.pw.value(&x), ..Default::default() };
        if let Some(pv) = &node.pv {
            out.hv = pv.value(&x);
        }
        if need == Need::Score {
            let pv = node.pv.as_ref().unwrap();
            let dgy: Vec<f64> = node.gdk.iter().map(|k| dot(k, flat)).collect();
            out.gy = node.gy0.iter().zip(&dgy).map(|(a, b)| a + b).collect();
            out.ghv = (0..self.model.q)
                .map(|l| {
                    // ∇X = ∇η (Y - y0) + η ∇(Y - y0)
                    let ge = &node.kern.grad_eta[l];
                    let g = &dgy[l * m..(l + 1) * m];
                    let gx: Vec<f64> = (0..m)
                        .map(|p| dot(&ge[p * m..(p + 1) * m], &dy) + dot(&eta[p * m..(p + 1) * m], g))
                        .collect();
                    pv.grad_value(l, &x, &gx)
                })
                .collect();
        }
        out
    }

    fn scalar_path(&self, theta: &[f64], i: usize, flat: &[f64], need: Need) -> Result<PathTerms> {
        let fbm = self.fbm_of(i, flat);
        let t = self.nodes[i];
        let y = euler_solve(&self.model, theta, &fbm, &self.obs.initial)?;
        let depth = if need == Need::Indicator { 1 } else { 2 };
        let w = scalar_weights(&self.model, theta, &fbm, &y, &self.cov, t, depth).map_err(|e| at_observation(e, i))?;
        Ok(PathTerms {
            y: y.at(t).to_vec(),
            hw: w[0].value,
            hv: w.get(1).map_or(0.0, |k| k.value),
            ..Default::default()
        })
    }

    fn path_terms(&self, theta: &[f64], i: usize, node: Option<&LinearNode>, range: std::ops::Range<usize>, need: Need) -> Result<Vec<PathTerms>> {
        let mut out = Vec::with_capacity(range.len());
        let mut start = range.start;
        while start < range.end {
            let end = (start + CHUNK).min(range.end);
            let flats = self.paths(i, start..end);
            match node {
                Some(nd) => out.extend(flats.par_iter().map(|f| self.linear_path(nd, f, need)).collect::<Vec<_>>()),
                None => out.extend(flats.par_iter().map(|f| self.scalar_path(theta, i, f, need)).collect::<Result<Vec<_>>>()?),
            }
            start = end;
        }
        Ok(out)
    }

    fn class_check(&self, need: Need) -> Result<bool> {
        match self.model.class() {
            ModelClass::LinearAdditive => Ok(true),
            ModelClass::ScalarNonlinear if need != Need::Score => Ok(false),
            ModelClass::ScalarNonlinear => Err(Error::Capability(
                "score needs θ-gradients of weights, available for linear drift with additive noise only".into(),
            )),
            ModelClass::Unsupported => Err(Error::Capability(format!(
                "model '{}' is neither linear-additive nor scalar",
                self.model.name
            ))),
        }
    }

    fn sides(&self, samples: &[PathTerms], x: &[f64]) -> Vec<i8> {
        (0..x.len())
            .map(|c| match self.cfg.tail {
                TailSide::Upper => 1,
                TailSide::Auto => {
                    let col: Vec<f64> = samples.iter().map(|s| s.y[c]).collect();
                    if x[c] >= quantile(&col, 0.5) {
                        1
                    } else {
                        -1
                    }
                }
            })
            .collect()
    }

    fn aggregate(&self, samples: &[PathTerms], x: &[f64], need: Need) -> ObservationTerms {
        let side = self.sides(samples, x);
        let m = x.len();
        let q = if need == Need::Score { self.model.q } else { 0 };
        let sign: f64 = side.iter().map(|&s| s as f64).product();
        let n = samples.len();
        let mut wv = Vec::with_capacity(n);
        let mut vv = vec![Vec::with_capacity(n); q];
        for s in samples {
            let ind: Vec<f64> = (0..m).map(|c| if side[c] as f64 * (s.y[c] - x[c]) > 0.0 { 1.0 } else { 0.0 }).collect();
            let psi: Vec<f64> = (0..m).map(|c| (side[c] as f64 * (s.y[c] - x[c])).max(0.0)).collect();
            let ppsi: f64 = psi.iter().product();
            match need {
                Need::Indicator => wv.push(sign * ind.iter().product::<f64>() * s.hw),
                Need::PositivePart => wv.push(ppsi * s.hv),
                Need::Score => {
                    wv.push(sign * ind.iter().product::<f64>() * s.hw);
                    for l in 0..q {
                        let mut a = 0.0;
                        for k in 0..m {
                            let others: f64 = (0..m).filter(|&c| c != k).map(|c| psi[c]).product();
                            a += side[k] as f64 * s.gy[l * m + k] * ind[k] * others;
                        }
                        vv[l].push(a * s.hv + ppsi * s.ghv[l]);
                    }
                }
            }
        }
        let (w, wse) = mean_se(&wv);
        let mut v = Vec::with_capacity(q);
        let mut cov_vw = Vec::with_capacity(q);
        for col in &vv {
            let (mv, se) = mean_se(col);
            v.push(Estimate { value: mv, se });
            cov_vw.push(if n > 1 { covariance(col, &wv) / n as f64 } else { 0.0 });
        }
        ObservationTerms { w: Estimate { value: w, se: wse }, v, cov_vw, paths: n, side }
    }

    fn terms(&self, theta: &[f64], which: &[usize], need: Need) -> Result<Vec<ObservationTerms>> {
        self.check_theta(theta)?;
        let linear = self.class_check(need)?;
        let nodes = if linear { Some(self.linear_nodes(theta, need, which)?) } else { None };
        let node = |j: usize| nodes.as_ref().map(|v| &v[j]);
        let base = self.budget.paths;
        let mut samples = which
            .iter()
            .enumerate()
            .map(|(j, &i)| self.path_terms(theta, i, node(j), 0..base, need))
            .collect::<Result<Vec<_>>>()?;
        let mut out: Vec<ObservationTerms> =
            which.iter().zip(&samples).map(|(&i, s)| self.aggregate(s, &self.obs.values[i], need)).collect();
        if need != Need::Score {
            return Ok(out);
        }
        // Escalation draws its extra paths from full-horizon streams shared by
        // all pending observations, so each extra path is simulated once.
        for level in 1..=self.cfg.escalations {
            let pending: Vec<usize> = (0..which.len()).filter(|&j| !out[j].reliable()).collect();
            if pending.is_empty() {
                break;
            }
            let lo = base * ((1 << (2 * (level - 1))) - 1);
            let hi = base * ((1 << (2 * level)) - 1);
            let mut start = lo;
            while start < hi {
                let end = (start + CHUNK).min(hi);
                let full: Vec<Vec<Vec<f64>>> = (start..end)
                    .into_par_iter()
                    .map(|k| self.full.increments(self.model.d, stream_seed(self.cfg.seed, SHARED_STREAM, k as u64)))
                    .collect();
                for &j in &pending {
                    let i = which[j];
                    let t = self.nodes[i];
                    let more = full
                        .par_iter()
                        .map(|incs| {
                            let flat: Vec<f64> = incs.iter().flat_map(|c| c[..t].iter().copied()).collect();
                            match node(j) {
                                Some(nd) => Ok(self.linear_path(nd, &flat, need)),
                                None => self.scalar_path(theta, i, &flat, need),
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    samples[j].extend(more);
                }
                start = end;
            }
            for &j in &pending {
                out[j] = self.aggregate(&samples[j], &self.obs.values[which[j]], need);
            }
        }
        Ok(out)
    }

    /// Ŵ_i, i.e. the density estimate at (t_i, y_{t_i}).
    pub fn estimate_w(&self, theta: &[f64], i: usize) -> Result<Estimate> {
        self.check_index(i)?;
        Ok(self.terms(theta, &[i], Need::Indicator)?[0].w)
    }

    /// Density at (t_i, y_{t_i}) by the second relation E[(F-x)_+ H_(1..m,1..m)].
    pub fn estimate_w_positive_part(&self, theta: &[f64], i: usize) -> Result<Estimate> {
        self.check_index(i)?;
        Ok(self.terms(theta, &[i], Need::PositivePart)?[0].w)
    }

    pub fn observation_terms(&self, theta: &[f64], i: usize) -> Result<ObservationTerms> {
        self.check_index(i)?;
        Ok(self.terms(theta, &[i], Need::Score)?.remove(0))
    }

    fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.obs.len() {
            return Err(Error::Argument(format!("observation index {i} out of range 0..{}", self.obs.len())));
        }
        Ok(())
    }

    /// Σ_i V̂_i/Ŵ_i per parameter, with delta-method standard errors.
    pub fn score(&self, theta: &[f64]) -> Result<ScoreValue> {
        self.score_with(theta, Unreliable::Error)
    }

    pub fn score_with(&self, theta: &[f64], policy: Unreliable) -> Result<ScoreValue> {
        let which: Vec<usize> = (0..self.obs.len()).collect();
        let terms = self.terms(theta, &which, Need::Score)?;
        let mut skipped = Vec::new();
        for (i, t) in terms.iter().enumerate() {
            if !t.reliable() {
                if policy == Unreliable::Error {
                    return Err(Error::UnreliableScore { index: i, w: t.w.value, se: t.w.se.unwrap_or(f64::NAN) });
                }
                skipped.push(i);
            }
        }
        if skipped.len() == terms.len() {
            return Err(Error::UnreliableScore { index: 0, w: terms[0].w.value, se: terms[0].w.se.unwrap_or(f64::NAN) });
        }
        let used: Vec<&ObservationTerms> = terms.iter().enumerate().filter(|(i, _)| !skipped.contains(i)).map(|(_, t)| t).collect();
        let q = self.model.q;
        let mut score = Vec::with_capacity(q);
        let mut se = Vec::with_capacity(q);
        for l in 0..q {
            let r: Vec<f64> = used.iter().map(|t| t.ratio(l)).collect();
            score.push(pairwise_sum(&r));
            let vars: Option<Vec<f64>> = used.iter().map(|t| t.ratio_var(l)).collect();
            se.push(vars.map(|v| pairwise_sum(&v).sqrt()));
        }
        if score.iter().any(|s| !s.is_finite()) {
            return Err(Error::Divergence { step: 0, context: "non-finite score".into() });
        }
        Ok(ScoreValue { terms, score, se, skipped })
    }
}

fn at_observation(e: Error, i: usize) -> Error {
    match e {
        Error::Singular { cond, .. } => Error::Degenerate(format!("Malliavin matrix singular at observation {i} (cond {cond:e})")),
        other => other,
    }
}

fn single(model: &ModelSpec, a: &[f64], t: f64, x: &[f64], budget: Budget, cfg: EngineConfig) -> Result<ScoreEngine> {
    let obs = Observations::new(vec![t], vec![x.to_vec()], a.to_vec())?;
    ScoreEngine::new(model, &obs, budget, cfg)
}

/// Density of Y_t at x for a process started at `a`; `budget.steps` covers [0, t].
pub fn estimate_density(
    model: &ModelSpec,
    theta: &[f64],
    a: &[f64],
    t: f64,
    x: &[f64],
    relation: DensityRelation,
    budget: Budget,
    cfg: EngineConfig,
) -> Result<Estimate> {
    let e = single(model, a, t, x, budget, cfg)?;
    match relation {
        DensityRelation::Indicator => e.estimate_w(theta, 0),
        DensityRelation::PositivePart => e.estimate_w_positive_part(theta, 0),
    }
}

pub fn estimate_w(model: &ModelSpec, theta: &[f64], obs: &Observations, i: usize, budget: Budget, cfg: EngineConfig) -> Result<Estimate> {
    ScoreEngine::new(model, obs, budget, cfg)?.estimate_w(theta, i)
}

pub fn estimate_v(
    model: &ModelSpec,
    theta: &[f64],
    l: usize,
    obs: &Observations,
    i: usize,
    budget: Budget,
    cfg: EngineConfig,
) -> Result<Estimate> {
    if l >= model.q {
        return Err(Error::Argument(format!("parameter index {l} out of range 0..{}", model.q)));
    }
    Ok(ScoreEngine::new(model, obs, budget, cfg)?.observation_terms(theta, i)?.v[l])
}

pub fn score(model: &ModelSpec, theta: &[f64], obs: &Observations, budget: Budget, cfg: EngineConfig) -> Result<ScoreValue> {
    ScoreEngine::new(model, obs, budget, cfg)?.score(theta)
}

/// Rule N = ceil(c·M^{γ̃/(2γ-1) - 3}) with γ̃ = T·m·(d+1), capped at `n_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BudgetRule {
    pub c: f64,
    pub n_max: usize,
}

impl Default for BudgetRule {
    fn default() -> Self {
        BudgetRule { c: 1.0, n_max: 1_000_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Allocation {
    pub paths: usize,
    pub capped: bool,
}

pub fn allocate_budget(steps: usize, gamma: f64, t: f64, m: usize, d: usize, rule: BudgetRule) -> Result<Allocation> {
    let gt = t * m as f64 * (d as f64 + 1.0);
    allocate_budget_exponent(steps, gamma, gt, rule)
}

/// As `allocate_budget` with γ̃ given directly.
pub fn allocate_budget_exponent(steps: usize, gamma: f64, gamma_tilde: f64, rule: BudgetRule) -> Result<Allocation> {
    if !(gamma > 0.5) {
        return Err(Error::Argument(format!("γ = {gamma} must exceed 1/2")));
    }
    if steps < 1 || !(rule.c > 0.0) || !(gamma_tilde > 0.0) {
        return Err(Error::Argument("budget rule needs M >= 1, c > 0 and γ̃ > 0".into()));
    }
    let e = gamma_tilde / (2.0 * gamma - 1.0) - 3.0;
    let raw = (rule.c * (steps as f64).powf(e)).ceil();
    // round away representation noise such as 100.00000000000001
    let near = raw.round();
    let raw = if ((rule.c * (steps as f64).powf(e)) - near).abs() < 1e-9 * near.max(1.0) { near } else { raw };
    if raw > rule.n_max as f64 {
        warn!("budget rule asks for {raw:e} paths; capped at {}", rule.n_max);
        return Ok(Allocation { paths: rule.n_max, capped: true });
    }
    Ok(Allocation { paths: (raw as usize).max(1), capped: false })
}
