//! Model specifications: drift and diffusion coefficient functions with analytic
//! spatial, parameter and mixed derivatives.
//!
//! Layouts (row-major, all flattened):
//!   μ: m            σ: m×d             (i, l)
//!   ∂μ: m×m (i, k)  ∂σ: m×d×m (i, l, k)
//!   ∂²μ: m×m×m      ∂²σ: m×d×m×m
//!   ∇μ: q×m         ∇σ: q×m×d
//!   ∇∂μ: q×m×m      ∇∂σ: q×m×d×m
//! Parameter derivatives are taken with respect to the full θ of the model.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::{CellCovariance, FbmPath, HurstParam, TimeGrid};
use crate::rng::rng_from;

/// Drift μ(y; p) with its derivatives. `p` is the drift's own parameter slice.
pub trait DriftFn: Send + Sync {
    fn dim(&self) -> usize;
    fn n_params(&self) -> usize;
    /// Declared affine in y.
    fn linear(&self) -> bool {
        false
    }
    fn eval(&self, y: &[f64], p: &[f64], out: &mut [f64]);
    fn jac(&self, y: &[f64], p: &[f64], out: &mut [f64]);
    fn hess(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    /// Third spatial derivative; returns false when not provided.
    fn third(&self, _y: &[f64], _p: &[f64], _out: &mut [f64]) -> bool {
        false
    }
    fn param(&self, y: &[f64], p: &[f64], out: &mut [f64]);
    fn jac_param(&self, y: &[f64], p: &[f64], out: &mut [f64]);
}

/// Diffusion σ(y; p) (m×d) with its derivatives.
pub trait DiffusionFn: Send + Sync {
    fn dim(&self) -> usize;
    fn channels(&self) -> usize;
    fn n_params(&self) -> usize;
    /// Declared constant in y.
    fn constant(&self) -> bool {
        false
    }
    fn eval(&self, y: &[f64], p: &[f64], out: &mut [f64]);
    fn jac(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn hess(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn third(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        self.constant()
    }
    fn param(&self, y: &[f64], p: &[f64], out: &mut [f64]);
    fn jac_param(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
}

pub struct ZeroDrift(pub usize);

impl DriftFn for ZeroDrift {
    fn dim(&self) -> usize {
        self.0
    }
    fn n_params(&self) -> usize {
        0
    }
    fn linear(&self) -> bool {
        true
    }
    fn eval(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn jac(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn third(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }
    fn param(&self, _y: &[f64], _p: &[f64], _out: &mut [f64]) {}
    fn jac_param(&self, _y: &[f64], _p: &[f64], _out: &mut [f64]) {}
}

/// μ(y) = -λ y (scalar).
pub struct MeanReverting;

impl DriftFn for MeanReverting {
    fn dim(&self) -> usize {
        1
    }
    fn n_params(&self) -> usize {
        1
    }
    fn linear(&self) -> bool {
        true
    }
    fn eval(&self, y: &[f64], p: &[f64], out: &mut [f64]) {
        out[0] = -p[0] * y[0];
    }
    fn jac(&self, _y: &[f64], p: &[f64], out: &mut [f64]) {
        out[0] = -p[0];
    }
    fn third(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) -> bool {
        out[0] = 0.0;
        true
    }
    fn param(&self, y: &[f64], _p: &[f64], out: &mut [f64]) {
        out[0] = -y[0];
    }
    fn jac_param(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) {
        out[0] = -1.0;
    }
}

/// μ(y) = θ y (scalar growth).
pub struct Growth;

impl DriftFn for Growth {
    fn dim(&self) -> usize {
        1
    }
    fn n_params(&self) -> usize {
        1
    }
    fn linear(&self) -> bool {
        true
    }
    fn eval(&self, y: &[f64], p: &[f64], out: &mut [f64]) {
        out[0] = p[0] * y[0];
    }
    fn jac(&self, _y: &[f64], p: &[f64], out: &mut [f64]) {
        out[0] = p[0];
    }
    fn third(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) -> bool {
        out[0] = 0.0;
        true
    }
    fn param(&self, y: &[f64], _p: &[f64], out: &mut [f64]) {
        out[0] = y[0];
    }
    fn jac_param(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
}

/// μ(y) = (-α y², -β y¹), i.e. -M y with M = [[0, α], [β, 0]].
pub struct CrossCoupled;

impl DriftFn for CrossCoupled {
    fn dim(&self) -> usize {
        2
    }
    fn n_params(&self) -> usize {
        2
    }
    fn linear(&self) -> bool {
        true
    }
    fn eval(&self, y: &[f64], p: &[f64], out: &mut [f64]) {
        out[0] = -p[0] * y[1];
        out[1] = -p[1] * y[0];
    }
    fn jac(&self, _y: &[f64], p: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, -p[0], -p[1], 0.0]);
    }
    fn third(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) -> bool {
        out.fill(0.0);
        true
    }
    fn param(&self, y: &[f64], _p: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[-y[1], 0.0, 0.0, -y[0]]);
    }
    fn jac_param(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, -1.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0]);
    }
}

/// μ(y) = a sin(y) (scalar, nonlinear).
pub struct Sine;

impl DriftFn for Sine {
    fn dim(&self) -> usize {
        1
    }
    fn n_params(&self) -> usize {
        1
    }
    fn eval(&self, y: &[f64], p: &[f64], out: &mut [f64]) {
        out[0] = p[0] * y[0].sin();
    }
    fn jac(&self, y: &[f64], p: &[f64], out: &mut [f64]) {
        out[0] = p[0] * y[0].cos();
    }
    fn hess(&self, y: &[f64], p: &[f64], out: &mut [f64]) {
        out[0] = -p[0] * y[0].sin();
    }
    fn third(&self, y: &[f64], p: &[f64], out: &mut [f64]) -> bool {
        out[0] = -p[0] * y[0].cos();
        true
    }
    fn param(&self, y: &[f64], _p: &[f64], out: &mut [f64]) {
        out[0] = y[0].sin();
    }
    fn jac_param(&self, y: &[f64], _p: &[f64], out: &mut [f64]) {
        out[0] = y[0].cos();
    }
}

/// σ = I_m.
pub struct UnitNoise(pub usize);

impl DiffusionFn for UnitNoise {
    fn dim(&self) -> usize {
        self.0
    }
    fn channels(&self) -> usize {
        self.0
    }
    fn n_params(&self) -> usize {
        0
    }
    fn constant(&self) -> bool {
        true
    }
    fn eval(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.0 {
            out[i * self.0 + i] = 1.0;
        }
    }
    fn param(&self, _y: &[f64], _p: &[f64], _out: &mut [f64]) {}
}

/// σ = s I_m.
pub struct ScaledNoise(pub usize);

impl DiffusionFn for ScaledNoise {
    fn dim(&self) -> usize {
        self.0
    }
    fn channels(&self) -> usize {
        self.0
    }
    fn n_params(&self) -> usize {
        1
    }
    fn constant(&self) -> bool {
        true
    }
    fn eval(&self, _y: &[f64], p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.0 {
            out[i * self.0 + i] = p[0];
        }
    }
    fn param(&self, _y: &[f64], _p: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.0 {
            out[i * self.0 + i] = 1.0;
        }
    }
}

/// σ(y) = 1 + tanh(y)/2 (scalar, state dependent).
pub struct TanhNoise;

impl DiffusionFn for TanhNoise {
    fn dim(&self) -> usize {
        1
    }
    fn channels(&self) -> usize {
        1
    }
    fn n_params(&self) -> usize {
        0
    }
    fn eval(&self, y: &[f64], _p: &[f64], out: &mut [f64]) {
        out[0] = 1.0 + 0.5 * y[0].tanh();
    }
    fn jac(&self, y: &[f64], _p: &[f64], out: &mut [f64]) {
        let t = y[0].tanh();
        out[0] = 0.5 * (1.0 - t * t);
    }
    fn hess(&self, y: &[f64], _p: &[f64], out: &mut [f64]) {
        let t = y[0].tanh();
        out[0] = -t * (1.0 - t * t);
    }
    fn third(&self, y: &[f64], _p: &[f64], out: &mut [f64]) -> bool {
        let t = y[0].tanh();
        let s = 1.0 - t * t;
        out[0] = -s * s + 2.0 * t * t * s;
        true
    }
    fn param(&self, _y: &[f64], _p: &[f64], _out: &mut [f64]) {}
}

pub fn registered_drift(name: &str, m: usize) -> Option<Arc<dyn DriftFn>> {
    Some(match name {
        "zero" => Arc::new(ZeroDrift(m)),
        "mean-reverting" => Arc::new(MeanReverting),
        "growth" => Arc::new(Growth),
        "cross-coupled" => Arc::new(CrossCoupled),
        "sine" => Arc::new(Sine),
        _ => return None,
    })
}

pub fn registered_diffusion(name: &str, m: usize) -> Option<Arc<dyn DiffusionFn>> {
    Some(match name {
        "unit" => Arc::new(UnitNoise(m)),
        "scaled" => Arc::new(ScaledNoise(m)),
        "tanh" => Arc::new(TanhNoise),
        _ => return None,
    })
}

pub const REGISTERED_DRIFTS: &[&str] = &["zero", "mean-reverting", "growth", "cross-coupled", "sine"];
pub const REGISTERED_DIFFUSIONS: &[&str] = &["unit", "scaled", "tanh"];

/// User model description: dimensions plus registered coefficient names and the
/// positions of each coefficient's parameters inside θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub name: String,
    pub m: usize,
    pub d: usize,
    pub q: usize,
    pub drift: String,
    #[serde(default)]
    pub drift_params: Vec<usize>,
    pub diffusion: String,
    #[serde(default)]
    pub diffusion_params: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelClass {
    /// ∂²μ = 0 and σ constant: all Malliavin derivatives beyond the first vanish.
    LinearAdditive,
    /// m = d = 1 with general coefficients.
    ScalarNonlinear,
    Unsupported,
}

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub m: usize,
    pub d: usize,
    pub q: usize,
    /// Nominal parameter supplied at construction.
    pub theta: Vec<f64>,
    pub linear_drift: bool,
    pub additive_noise: bool,
    drift: Arc<dyn DriftFn>,
    drift_map: Vec<usize>,
    diffusion: Arc<dyn DiffusionFn>,
    diffusion_map: Vec<usize>,
}

impl std::fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("m", &self.m)
            .field("d", &self.d)
            .field("q", &self.q)
            .field("theta", &self.theta)
            .field("linear_drift", &self.linear_drift)
            .field("additive_noise", &self.additive_noise)
            .finish()
    }
}

fn gather(theta: &[f64], map: &[usize]) -> [f64; 8] {
    let mut buf = [0.0; 8];
    for (b, &i) in buf.iter_mut().zip(map) {
        *b = theta[i];
    }
    buf
}

impl ModelSpec {
    /// Assemble a model and verify dimensions and flags on random probes.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        q: usize,
        drift: Arc<dyn DriftFn>,
        drift_map: Vec<usize>,
        diffusion: Arc<dyn DiffusionFn>,
        diffusion_map: Vec<usize>,
        theta: Vec<f64>,
    ) -> Result<Self> {
        let m = drift.dim();
        let d = diffusion.channels();
        if diffusion.dim() != m {
            return Err(Error::Argument(format!(
                "drift has dimension {m} but diffusion has {}",
                diffusion.dim()
            )));
        }
        if drift_map.len() != drift.n_params() || diffusion_map.len() != diffusion.n_params() {
            return Err(Error::Argument("parameter map length does not match coefficient".into()));
        }
        if drift_map.iter().chain(&diffusion_map).any(|&i| i >= q) {
            return Err(Error::Argument(format!("parameter index outside 0..{q}")));
        }
        if theta.len() != q {
            return Err(Error::Argument(format!("θ has length {}, model needs {q}", theta.len())));
        }
        if drift_map.len() > 8 || diffusion_map.len() > 8 {
            return Err(Error::Argument("at most 8 parameters per coefficient".into()));
        }
        let mut spec = ModelSpec {
            name: name.to_string(),
            m,
            d,
            q,
            theta,
            linear_drift: false,
            additive_noise: false,
            drift,
            drift_map,
            diffusion,
            diffusion_map,
        };
        let (lin, add) = spec.probe_flags(&spec.theta.clone());
        if spec.drift.linear() && !lin {
            return Err(Error::Argument(format!("{name}: drift declared linear but ∂²μ ≠ 0 at a probe")));
        }
        if spec.diffusion.constant() && !add {
            return Err(Error::Argument(format!("{name}: diffusion declared constant but ∂σ ≠ 0 at a probe")));
        }
        spec.linear_drift = lin;
        spec.additive_noise = add;
        Ok(spec)
    }

    pub fn from_file(file: &ModelFile, theta: Vec<f64>) -> Result<Self> {
        let drift = registered_drift(&file.drift, file.m).ok_or_else(|| {
            Error::Argument(format!("unknown drift '{}' (registered: {REGISTERED_DRIFTS:?})", file.drift))
        })?;
        let diffusion = registered_diffusion(&file.diffusion, file.m).ok_or_else(|| {
            Error::Argument(format!(
                "unknown diffusion '{}' (registered: {REGISTERED_DIFFUSIONS:?})",
                file.diffusion
            ))
        })?;
        if drift.dim() != file.m || diffusion.channels() != file.d {
            return Err(Error::Argument(format!(
                "declared (m, d) = ({}, {}) but coefficients give ({}, {})",
                file.m,
                file.d,
                drift.dim(),
                diffusion.channels()
            )));
        }
        ModelSpec::new(
            &file.name,
            file.q,
            drift,
            file.drift_params.clone(),
            diffusion,
            file.diffusion_params.clone(),
            theta,
        )
    }

    /// Whether ∂²μ and ∂σ vanish exactly at 10 random probe points.
    fn probe_flags(&self, theta: &[f64]) -> (bool, bool) {
        let mut rng = rng_from(0x5eed);
        let (m, d) = (self.m, self.d);
        let mut h = vec![0.0; m * m * m];
        let mut j = vec![0.0; m * d * m];
        let mut lin = true;
        let mut add = true;
        for _ in 0..10 {
            let y: Vec<f64> = (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect();
            self.d2mu(&y, theta, &mut h);
            self.dsigma(&y, theta, &mut j);
            lin &= h.iter().all(|v| *v == 0.0);
            add &= j.iter().all(|v| *v == 0.0);
        }
        (lin, add)
    }

    pub fn class(&self) -> ModelClass {
        if self.linear_drift && self.additive_noise {
            ModelClass::LinearAdditive
        } else if self.m == 1 && self.d == 1 {
            ModelClass::ScalarNonlinear
        } else {
            ModelClass::Unsupported
        }
    }

    pub fn with_theta(&self, theta: &[f64]) -> Self {
        let mut s = self.clone();
        s.theta = theta.to_vec();
        s
    }

    pub fn mu(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        self.drift.eval(y, &gather(theta, &self.drift_map), out);
    }

    pub fn sigma(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        self.diffusion.eval(y, &gather(theta, &self.diffusion_map), out);
    }

    pub fn dmu(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        self.drift.jac(y, &gather(theta, &self.drift_map), out);
    }

    pub fn dsigma(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        self.diffusion.jac(y, &gather(theta, &self.diffusion_map), out);
    }

    pub fn d2mu(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        self.drift.hess(y, &gather(theta, &self.drift_map), out);
    }

    pub fn d2sigma(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        self.diffusion.hess(y, &gather(theta, &self.diffusion_map), out);
    }

    /// Third derivatives (m^4 and m·d·m^3); false if either coefficient lacks them.
    pub fn d3(&self, y: &[f64], theta: &[f64], mu_out: &mut [f64], sigma_out: &mut [f64]) -> bool {
        let a = self.drift.third(y, &gather(theta, &self.drift_map), mu_out);
        let b = self.diffusion.third(y, &gather(theta, &self.diffusion_map), sigma_out);
        a && b
    }

    /// ∇_θ μ (q×m).
    pub fn grad_mu(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        let m = self.m;
        out.fill(0.0);
        let mut buf = vec![0.0; self.drift_map.len() * m];
        self.drift.param(y, &gather(theta, &self.drift_map), &mut buf);
        for (a, &l) in self.drift_map.iter().enumerate() {
            for i in 0..m {
                out[l * m + i] += buf[a * m + i];
            }
        }
    }

    /// ∇_θ σ (q×m×d).
    pub fn grad_sigma(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        let s = self.m * self.d;
        out.fill(0.0);
        let mut buf = vec![0.0; self.diffusion_map.len() * s];
        self.diffusion.param(y, &gather(theta, &self.diffusion_map), &mut buf);
        for (a, &l) in self.diffusion_map.iter().enumerate() {
            for i in 0..s {
                out[l * s + i] += buf[a * s + i];
            }
        }
    }

    /// ∇_θ ∂μ (q×m×m).
    pub fn grad_dmu(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        let s = self.m * self.m;
        out.fill(0.0);
        let mut buf = vec![0.0; self.drift_map.len() * s];
        self.drift.jac_param(y, &gather(theta, &self.drift_map), &mut buf);
        for (a, &l) in self.drift_map.iter().enumerate() {
            for i in 0..s {
                out[l * s + i] += buf[a * s + i];
            }
        }
    }

    /// ∇_θ ∂σ (q×m×d×m).
    pub fn grad_dsigma(&self, y: &[f64], theta: &[f64], out: &mut [f64]) {
        let s = self.m * self.d * self.m;
        out.fill(0.0);
        let mut buf = vec![0.0; self.diffusion_map.len() * s];
        self.diffusion.jac_param(y, &gather(theta, &self.diffusion_map), &mut buf);
        for (a, &l) in self.diffusion_map.iter().enumerate() {
            for i in 0..s {
                out[l * s + i] += buf[a * s + i];
            }
        }
    }

    /// Smallest eigenvalue of σσ* at y.
    pub fn ellipticity(&self, y: &[f64], theta: &[f64]) -> f64 {
        let (m, d) = (self.m, self.d);
        let mut s = vec![0.0; m * d];
        self.sigma(y, theta, &mut s);
        let sm = nalgebra::DMatrix::from_row_slice(m, d, &s);
        let a = &sm * sm.transpose();
        a.symmetric_eigenvalues().min()
    }
}

pub const BUILTIN_MODELS: &[&str] = &["fou", "linear2d", "findrift", "sindrift", "sintanh"];

/// Built-in models by name:
/// fou (λ), linear2d (α, β), findrift (μ, σ), and the scalar nonlinear
/// sindrift (a: μ = a sin y, σ = 1) and sintanh (a: μ = a sin y, σ = 1 + tanh(y)/2).
pub fn get_model(name: &str, theta: &[f64]) -> Result<ModelSpec> {
    let t = theta.to_vec();
    match name {
        "fou" => ModelSpec::new(name, 1, Arc::new(MeanReverting), vec![0], Arc::new(UnitNoise(1)), vec![], t),
        "linear2d" => {
            ModelSpec::new(name, 2, Arc::new(CrossCoupled), vec![0, 1], Arc::new(ScaledNoise(2)), vec![1], t)
        }
        "findrift" => ModelSpec::new(name, 2, Arc::new(Growth), vec![0], Arc::new(ScaledNoise(1)), vec![1], t),
        "sindrift" => ModelSpec::new(name, 1, Arc::new(Sine), vec![0], Arc::new(UnitNoise(1)), vec![], t),
        "sintanh" => ModelSpec::new(name, 1, Arc::new(Sine), vec![0], Arc::new(TanhNoise), vec![], t),
        _ => Err(Error::Argument(format!("unknown model '{name}' (built-ins: {BUILTIN_MODELS:?})"))),
    }
}

/// Trivial model dY = dB in m dimensions (no parameters).
pub fn brownian_model(m: usize) -> ModelSpec {
    ModelSpec::new("brownian", 0, Arc::new(ZeroDrift(m)), vec![], Arc::new(UnitNoise(m)), vec![], vec![])
        .expect("brownian model is consistent")
}

/// Closed forms of the fractional OU process dY = -λY dt + dB, Y_0 = 0, at the
/// terminal node, evaluated with midpoint kernels on the cells of the path:
///   Y_T = ∫ g dB,  g(s) = e^{-λ(T-s)} = D_sY_T,  γ_T = ‖g‖²,
///   ∂_λY_T = -∫ (T-s) g(s) dB_s,
///   H_(1) = W(g)/γ,  H_(1,1) = W(g)²/γ² - 1/γ,
///   ∂_λH_(1,1) = 2W(g)W(∂g)/γ² - 2W(g)²∂γ/γ³ + ∂γ/γ²,  ∂g = -(T-s)g, ∂γ = 2⟨∂g, g⟩.
#[derive(Debug, Clone, PartialEq)]
pub struct OuOracle {
    pub y: f64,
    /// D_sY_T at cell midpoints.
    pub kernel: Vec<f64>,
    pub dlambda_y: f64,
    pub gamma: f64,
    pub h1: f64,
    pub h11: f64,
    pub dlambda_h11: f64,
}

pub fn ou_oracle(lambda: f64, h: HurstParam, grid: &TimeGrid, fbm: &FbmPath) -> OuOracle {
    let t = grid.horizon();
    let dt = grid.dt();
    let m = grid.steps();
    let cov = CellCovariance::new(grid, h);
    let g: Vec<f64> = (0..m).map(|k| (-lambda * (t - (k as f64 + 0.5) * dt)).exp()).collect();
    let dg: Vec<f64> = (0..m).map(|k| -(t - (k as f64 + 0.5) * dt) * g[k]).collect();
    let xi: Vec<f64> = (0..m).map(|k| fbm.increment(0, k)).collect();
    let w: f64 = g.iter().zip(&xi).map(|(a, b)| a * b).sum();
    let wd: f64 = dg.iter().zip(&xi).map(|(a, b)| a * b).sum();
    let gamma = cov.quad(&g, &g);
    let dgamma = 2.0 * cov.quad(&dg, &g);
    OuOracle {
        y: w,
        dlambda_y: wd,
        gamma,
        h1: w / gamma,
        h11: w * w / (gamma * gamma) - 1.0 / gamma,
        dlambda_h11: 2.0 * w * wd / gamma.powi(2) - 2.0 * w * w * dgamma / gamma.powi(3) + dgamma / gamma.powi(2),
        kernel: g,
    }
}
