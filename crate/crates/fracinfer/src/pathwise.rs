//! Left-point Young integration and Euler schemes on the fBm grid.
//!
//! The generic linear controlled equation is discretized as
//!
//!   Z_{k+1} = Z_k + (ξ²_k Z_k + f²_k) Δ + Σ_j (ξ^{1,j}_k Z_k + f^{1,j}_k) ΔB^j_k,
//!
//! where the forcing terms f are optional.

use crate::error::{Error, Result};
use crate::fbm::{FbmPath, TimeGrid};
use crate::models::ModelSpec;

const BLOWUP: f64 = 1e12;

/// Σ g(τ_k)(f(τ_{k+1}) - f(τ_k)) over node values.
pub fn young_integral(g: &[f64], f: &[f64]) -> Result<f64> {
    if g.len() != f.len() {
        return Err(Error::Argument(format!("integrand has {} nodes, integrator {}", g.len(), f.len())));
    }
    Ok(g.iter().zip(f.windows(2)).map(|(a, w)| a * (w[1] - w[0])).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionPath {
    pub grid: TimeGrid,
    pub dim: usize,
    /// Node-major: values[k * dim + i].
    pub values: Vec<f64>,
}

impl SolutionPath {
    #[inline]
    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn component(&self, i: usize) -> Vec<f64> {
        self.values.iter().skip(i).step_by(self.dim).copied().collect()
    }

    pub fn terminal(&self) -> &[f64] {
        self.at(self.grid.steps())
    }

    /// sup over node pairs of |Z_q - Z_p| / |τ_q - τ_p|^γ (Euclidean norm).
    pub fn holder(&self, gamma: f64) -> f64 {
        let n = self.grid.steps();
        let dt = self.grid.dt();
        let mut best: f64 = 0.0;
        for p in 0..n {
            for q in p + 1..=n {
                let diff: f64 = self
                    .at(q)
                    .iter()
                    .zip(self.at(p))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                best = best.max(diff / ((q - p) as f64 * dt).powf(gamma));
            }
        }
        best
    }
}

/// Coefficient paths of the linear controlled equation, one entry per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledCoeffs {
    pub dim: usize,
    pub channels: usize,
    pub steps: usize,
    /// steps × dim × dim
    pub drift: Vec<f64>,
    /// steps × channels × dim × dim
    pub diffusion: Vec<f64>,
    /// steps × dim
    pub drift_forcing: Option<Vec<f64>>,
    /// steps × channels × dim
    pub diffusion_forcing: Option<Vec<f64>>,
    pub initial: Vec<f64>,
}

impl ControlledCoeffs {
    pub fn zero(dim: usize, channels: usize, steps: usize, initial: Vec<f64>) -> Self {
        ControlledCoeffs {
            dim,
            channels,
            steps,
            drift: vec![0.0; steps * dim * dim],
            diffusion: vec![0.0; steps * channels * dim * dim],
            drift_forcing: None,
            diffusion_forcing: None,
            initial,
        }
    }

    fn check(&self, fbm: &FbmPath) -> Result<()> {
        let (q, d, n) = (self.dim, self.channels, self.steps);
        if n != fbm.grid.steps() || d != fbm.dim() {
            return Err(Error::Argument(format!(
                "coefficients on {n} steps × {d} channels, path has {} × {}",
                fbm.grid.steps(),
                fbm.dim()
            )));
        }
        let ok = self.drift.len() == n * q * q
            && self.diffusion.len() == n * d * q * q
            && self.initial.len() == q
            && self.drift_forcing.as_ref().is_none_or(|f| f.len() == n * q)
            && self.diffusion_forcing.as_ref().is_none_or(|f| f.len() == n * d * q);
        if !ok {
            return Err(Error::Argument("coefficient arrays have inconsistent sizes".into()));
        }
        Ok(())
    }

    /// One Euler step from cell k: z ← z + (ξ²z + f²)Δ + Σ(ξ¹z + f¹)ΔB.
    #[inline]
    pub fn step(&self, k: usize, dt: f64, db: &[f64], z: &mut [f64], scratch: &mut [f64]) {
        let q = self.dim;
        let a = &self.drift[k * q * q..(k + 1) * q * q];
        for i in 0..q {
            let mut acc = 0.0;
            for j in 0..q {
                acc += a[i * q + j] * z[j];
            }
            scratch[i] = acc * dt;
        }
        if let Some(f) = &self.drift_forcing {
            for i in 0..q {
                scratch[i] += f[k * q + i] * dt;
            }
        }
        for (l, &dbl) in db.iter().enumerate() {
            let s = &self.diffusion[(k * self.channels + l) * q * q..][..q * q];
            for i in 0..q {
                let mut acc = 0.0;
                for j in 0..q {
                    acc += s[i * q + j] * z[j];
                }
                scratch[i] += acc * dbl;
            }
            if let Some(f) = &self.diffusion_forcing {
                for i in 0..q {
                    scratch[i] += f[(k * self.channels + l) * q + i] * dbl;
                }
            }
        }
        for i in 0..q {
            z[i] += scratch[i];
        }
    }
}

fn guard(z: &[f64], step: usize) -> Result<()> {
    if z.iter().any(|v| !v.is_finite() || v.abs() > BLOWUP) {
        Err(Error::Divergence { step, context: String::new() })
    } else {
        Ok(())
    }
}

/// Euler recursion of the linear equation started at node `start` with `coeffs.initial`;
/// Z is zero before `start`.
pub fn linear_solve(coeffs: &ControlledCoeffs, fbm: &FbmPath, start: usize) -> Result<SolutionPath> {
    coeffs.check(fbm)?;
    let n = coeffs.steps;
    if start > n {
        return Err(Error::Argument(format!("start node {start} outside 0..={n}")));
    }
    let q = coeffs.dim;
    let dt = fbm.grid.dt();
    let mut values = vec![0.0; (n + 1) * q];
    let mut z = coeffs.initial.clone();
    let mut scratch = vec![0.0; q];
    let mut db = vec![0.0; coeffs.channels];
    values[start * q..(start + 1) * q].copy_from_slice(&z);
    for k in start..n {
        for (j, v) in db.iter_mut().enumerate() {
            *v = fbm.increment(j, k);
        }
        coeffs.step(k, dt, &db, &mut z, &mut scratch);
        guard(&z, k + 1)?;
        values[(k + 1) * q..(k + 2) * q].copy_from_slice(&z);
    }
    Ok(SolutionPath { grid: fbm.grid, dim: q, values })
}

/// Explicit Euler scheme Y_{k+1} = Y_k + μ(Y_k)Δ + σ(Y_k)ΔB_k.
pub fn euler_solve(model: &ModelSpec, theta: &[f64], fbm: &FbmPath, a: &[f64]) -> Result<SolutionPath> {
    let (m, d) = (model.m, model.d);
    if a.len() != m || fbm.dim() != d || theta.len() != model.q {
        return Err(Error::Argument(format!(
            "dimension mismatch: a has {}, model m = {m}, path d = {} (model d = {d}), θ has {}",
            a.len(),
            fbm.dim(),
            theta.len()
        )));
    }
    let n = fbm.grid.steps();
    let dt = fbm.grid.dt();
    let mut values = vec![0.0; (n + 1) * m];
    values[..m].copy_from_slice(a);
    let mut mu = vec![0.0; m];
    let mut sig = vec![0.0; m * d];
    let mut y = a.to_vec();
    for k in 0..n {
        model.mu(&y, theta, &mut mu);
        model.sigma(&y, theta, &mut sig);
        for i in 0..m {
            let mut acc = mu[i] * dt;
            for l in 0..d {
                acc += sig[i * d + l] * fbm.increment(l, k);
            }
            y[i] += acc;
        }
        guard(&y, k + 1)?;
        values[(k + 1) * m..(k + 2) * m].copy_from_slice(&y);
    }
    Ok(SolutionPath { grid: fbm.grid, dim: m, values })
}

/// Coefficients of the first-variation equation along Y: ξ² = ∂μ(Y), ξ¹ = ∂σ(Y).
pub fn variation_coeffs(model: &ModelSpec, theta: &[f64], y: &SolutionPath) -> ControlledCoeffs {
    let (m, d) = (model.m, model.d);
    let n = y.grid.steps();
    let mut c = ControlledCoeffs::zero(m, d, n, vec![0.0; m]);
    let mut ds = vec![0.0; m * d * m];
    for k in 0..n {
        model.dmu(y.at(k), theta, &mut c.drift[k * m * m..(k + 1) * m * m]);
        model.dsigma(y.at(k), theta, &mut ds);
        for l in 0..d {
            let blk = &mut c.diffusion[(k * d + l) * m * m..][..m * m];
            for i in 0..m {
                for kk in 0..m {
                    blk[i * m + kk] = ds[(i * d + l) * m + kk];
                }
            }
        }
    }
    c
}

/// Matrices A_k = I + ∂μ(Y_k)Δ + Σ_l ∂σ^{·l}(Y_k) ΔB^l_k of the Euler first variation.
pub fn variation_matrices(coeffs: &ControlledCoeffs, fbm: &FbmPath) -> Vec<f64> {
    let q = coeffs.dim;
    let d = coeffs.channels;
    let dt = fbm.grid.dt();
    let mut out = vec![0.0; coeffs.steps * q * q];
    for k in 0..coeffs.steps {
        let a = &mut out[k * q * q..(k + 1) * q * q];
        for i in 0..q {
            a[i * q + i] = 1.0;
        }
        for (x, v) in a.iter_mut().zip(&coeffs.drift[k * q * q..(k + 1) * q * q]) {
            *x += v * dt;
        }
        for l in 0..d {
            let db = fbm.increment(l, k);
            for (x, v) in a.iter_mut().zip(&coeffs.diffusion[(k * d + l) * q * q..][..q * q]) {
                *x += v * db;
            }
        }
    }
    out
}
