//! Malliavin derivatives of the Euler solution with respect to the grid increments.
//!
//! D^j_r Y_t is the derivative of the Euler state at node t with respect to the
//! increment ΔB^j_r of cell r. It vanishes for t ≤ r except for the stored
//! diagonal value σ^{·j}(Y_r) at t = r; for t > r it solves the first variation
//! equation started at node r+1 from σ^{·j}(Y_r). The second derivative adds
//! the source ∂²μ(D_a, D_b)Δ + Σ_l ∂²σ^{·l}(D_a, D_b)ΔB^l and starts at node
//! r₂+1 from ∂σ^{·j₂}(Y_{r₂}) D_a Y_{r₂}.

use crate::error::{Error, Result};
use crate::fbm::FbmPath;
use crate::models::ModelSpec;
use crate::pathwise::{linear_solve, variation_coeffs, variation_matrices, ControlledCoeffs, SolutionPath};

/// Order-one triangular array D^j_r Y^i_t.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstDerivative {
    pub m: usize,
    pub d: usize,
    pub steps: usize,
    data: Vec<f64>,
}

impl FirstDerivative {
    pub fn zeros(m: usize, d: usize, steps: usize) -> Self {
        FirstDerivative { m, d, steps, data: vec![0.0; d * steps * (steps + 1) * m] }
    }

    #[inline]
    fn offset(&self, j: usize, r: usize, t: usize) -> usize {
        ((j * self.steps + r) * (self.steps + 1) + t) * self.m
    }

    /// D^j_r Y_t as an m-vector.
    #[inline]
    pub fn at(&self, j: usize, r: usize, t: usize) -> &[f64] {
        let o = self.offset(j, r, t);
        &self.data[o..o + self.m]
    }

    #[inline]
    pub fn at_mut(&mut self, j: usize, r: usize, t: usize) -> &mut [f64] {
        let o = self.offset(j, r, t);
        &mut self.data[o..o + self.m]
    }

    /// Kernel r ↦ D^j_r Y^i_t over the cells r < t.
    pub fn kernel(&self, i: usize, j: usize, t: usize) -> Vec<f64> {
        (0..t).map(|r| self.at(j, r, t)[i]).collect()
    }
}

/// Order-two array D^{j₁j₂}_{r₁r₂} Y^i_t, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondDerivative {
    pub m: usize,
    pub d: usize,
    pub steps: usize,
    data: Vec<f64>,
}

impl SecondDerivative {
    #[inline]
    fn offset(&self, j1: usize, r1: usize, j2: usize, r2: usize, t: usize) -> usize {
        let n = self.steps;
        ((((j1 * n + r1) * self.d + j2) * n + r2) * (n + 1) + t) * self.m
    }

    pub fn at(&self, j1: usize, r1: usize, j2: usize, r2: usize, t: usize) -> &[f64] {
        let o = self.offset(j1, r1, j2, r2, t);
        &self.data[o..o + self.m]
    }
}

/// Matrices ∂σ^{·l}(y) laid out as d blocks of m×m.
fn dsigma_blocks(model: &ModelSpec, theta: &[f64], y: &[f64]) -> Vec<f64> {
    let (m, d) = (model.m, model.d);
    let mut ds = vec![0.0; m * d * m];
    model.dsigma(y, theta, &mut ds);
    let mut out = vec![0.0; d * m * m];
    for l in 0..d {
        for i in 0..m {
            for k in 0..m {
                out[(l * m + i) * m + k] = ds[(i * d + l) * m + k];
            }
        }
    }
    out
}

#[inline]
fn matvec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let m = x.len();
    for i in 0..m {
        let mut acc = 0.0;
        for k in 0..m {
            acc += a[i * m + k] * x[k];
        }
        out[i] = acc;
    }
}

pub fn derivative_first(model: &ModelSpec, theta: &[f64], fbm: &FbmPath, y: &SolutionPath) -> Result<FirstDerivative> {
    let (m, d) = (model.m, model.d);
    let n = fbm.grid.steps();
    if y.grid != fbm.grid || y.dim != m {
        return Err(Error::Argument("solution path does not match the driving path".into()));
    }
    let a = variation_matrices(&variation_coeffs(model, theta, y), fbm);
    let mut out = FirstDerivative::zeros(m, d, n);
    let mut sig = vec![0.0; m * d];
    let mut z = vec![0.0; m];
    let mut nz = vec![0.0; m];
    for r in 0..n {
        model.sigma(y.at(r), theta, &mut sig);
        for j in 0..d {
            for i in 0..m {
                z[i] = sig[i * d + j];
            }
            out.at_mut(j, r, r).copy_from_slice(&z);
            out.at_mut(j, r, r + 1).copy_from_slice(&z);
            for k in r + 1..n {
                matvec(&a[k * m * m..(k + 1) * m * m], &z, &mut nz);
                std::mem::swap(&mut z, &mut nz);
                if z.iter().any(|v| !v.is_finite() || v.abs() > 1e12) {
                    return Err(Error::Divergence { step: k + 1, context: format!(" (start r = {r}, channel {j})") });
                }
                out.at_mut(j, r, k + 1).copy_from_slice(&z);
            }
        }
    }
    Ok(out)
}

/// ∇_l Y for every parameter l: Z_{k+1} = A_k Z_k + ∇_lμ(Y_k)Δ + Σ_j ∇_lσ^{·j}(Y_k)ΔB^j_k, Z_0 = 0.
pub fn theta_gradient(model: &ModelSpec, theta: &[f64], fbm: &FbmPath, y: &SolutionPath) -> Result<Vec<SolutionPath>> {
    let (m, d, q) = (model.m, model.d, model.q);
    let n = fbm.grid.steps();
    let base = variation_coeffs(model, theta, y);
    let mut gmu = vec![0.0; q * m];
    let mut gsig = vec![0.0; q * m * d];
    let mut drift_f = vec![vec![0.0; n * m]; q];
    let mut diff_f = vec![vec![0.0; n * d * m]; q];
    for k in 0..n {
        model.grad_mu(y.at(k), theta, &mut gmu);
        model.grad_sigma(y.at(k), theta, &mut gsig);
        for l in 0..q {
            drift_f[l][k * m..(k + 1) * m].copy_from_slice(&gmu[l * m..(l + 1) * m]);
            for j in 0..d {
                for i in 0..m {
                    diff_f[l][(k * d + j) * m + i] = gsig[(l * m + i) * d + j];
                }
            }
        }
    }
    let mut out = Vec::with_capacity(q);
    for (df, sf) in drift_f.into_iter().zip(diff_f) {
        let mut c = base.clone();
        c.drift_forcing = Some(df);
        c.diffusion_forcing = Some(sf);
        out.push(linear_solve(&c, fbm, 0).map_err(|e| e.with_context("in θ-gradient"))?);
    }
    Ok(out)
}

/// ∇_l A_k = (∂²μ[∇_lY_k] + ∇_l∂μ)Δ + Σ_j (∂²σ^{·j}[∇_lY_k] + ∇_l∂σ^{·j})ΔB^j_k, for each l (q × steps × m×m).
pub fn variation_matrix_gradients(
    model: &ModelSpec,
    theta: &[f64],
    fbm: &FbmPath,
    y: &SolutionPath,
    grad_y: &[SolutionPath],
) -> Vec<Vec<f64>> {
    let (m, d, q) = (model.m, model.d, model.q);
    let n = fbm.grid.steps();
    let dt = fbm.grid.dt();
    let mut h_mu = vec![0.0; m * m * m];
    let mut h_sig = vec![0.0; m * d * m * m];
    let mut g_dmu = vec![0.0; q * m * m];
    let mut g_dsig = vec![0.0; q * m * d * m];
    let mut out = vec![vec![0.0; n * m * m]; q];
    for k in 0..n {
        let yk = y.at(k);
        model.d2mu(yk, theta, &mut h_mu);
        model.d2sigma(yk, theta, &mut h_sig);
        model.grad_dmu(yk, theta, &mut g_dmu);
        model.grad_dsigma(yk, theta, &mut g_dsig);
        for l in 0..q {
            let gy = grad_y[l].at(k);
            let blk = &mut out[l][k * m * m..(k + 1) * m * m];
            for i in 0..m {
                for c in 0..m {
                    let mut v = g_dmu[(l * m + i) * m + c];
                    for e in 0..m {
                        v += h_mu[(i * m + c) * m + e] * gy[e];
                    }
                    let mut acc = v * dt;
                    for j in 0..d {
                        let mut w = g_dsig[((l * m + i) * d + j) * m + c];
                        for e in 0..m {
                            w += h_sig[((i * d + j) * m + c) * m + e] * gy[e];
                        }
                        acc += w * fbm.increment(j, k);
                    }
                    blk[i * m + c] = acc;
                }
            }
        }
    }
    out
}

/// θ-derivatives of the first Malliavin derivative array, one array per parameter.
pub fn grad_derivative_first(
    model: &ModelSpec,
    theta: &[f64],
    fbm: &FbmPath,
    y: &SolutionPath,
    grad_y: &[SolutionPath],
    d1: &FirstDerivative,
) -> Result<Vec<FirstDerivative>> {
    let (m, d, q) = (model.m, model.d, model.q);
    let n = fbm.grid.steps();
    let a = variation_matrices(&variation_coeffs(model, theta, y), fbm);
    let ga = variation_matrix_gradients(model, theta, fbm, y, grad_y);
    let mut gsig = vec![0.0; q * m * d];
    let mut out = vec![FirstDerivative::zeros(m, d, n); q];
    let mut z = vec![0.0; m];
    let mut t1 = vec![0.0; m];
    let mut t2 = vec![0.0; m];
    for r in 0..n {
        let yr = y.at(r);
        let dsb = dsigma_blocks(model, theta, yr);
        model.grad_sigma(yr, theta, &mut gsig);
        for l in 0..q {
            let gy = grad_y[l].at(r);
            for j in 0..d {
                // ∇_l[σ^{·j}(Y_r)] = ∂σ^{·j}(Y_r)∇_lY_r + ∇_lσ^{·j}(Y_r)
                matvec(&dsb[j * m * m..(j + 1) * m * m], gy, &mut z);
                for i in 0..m {
                    z[i] += gsig[(l * m + i) * d + j];
                }
                out[l].at_mut(j, r, r).copy_from_slice(&z);
                out[l].at_mut(j, r, r + 1).copy_from_slice(&z);
                for k in r + 1..n {
                    matvec(&a[k * m * m..(k + 1) * m * m], &z, &mut t1);
                    matvec(&ga[l][k * m * m..(k + 1) * m * m], d1.at(j, r, k), &mut t2);
                    for i in 0..m {
                        z[i] = t1[i] + t2[i];
                    }
                    out[l].at_mut(j, r, k + 1).copy_from_slice(&z);
                }
            }
        }
    }
    Ok(out)
}

/// Coefficients and initial value of the second-derivative equation for the pair
/// (j₁, r₁), (j₂, r₂) with r₁ ≤ r₂, started at node r₂+1.
fn second_pair_coeffs(
    model: &ModelSpec,
    theta: &[f64],
    fbm: &FbmPath,
    y: &SolutionPath,
    base: &ControlledCoeffs,
    da: &SolutionPath,
    db: &SolutionPath,
    (j2, r2): (usize, usize),
) -> ControlledCoeffs {
    let (m, d) = (model.m, model.d);
    let n = fbm.grid.steps();
    let mut h_mu = vec![0.0; m * m * m];
    let mut h_sig = vec![0.0; m * d * m * m];
    let mut drift_f = vec![0.0; n * m];
    let mut diff_f = vec![0.0; n * d * m];
    for k in r2 + 1..n {
        model.d2mu(y.at(k), theta, &mut h_mu);
        model.d2sigma(y.at(k), theta, &mut h_sig);
        let (za, zb) = (da.at(k), db.at(k));
        for i in 0..m {
            let mut acc = 0.0;
            for c in 0..m {
                for e in 0..m {
                    acc += h_mu[(i * m + c) * m + e] * za[c] * zb[e];
                }
            }
            drift_f[k * m + i] = acc;
            for l in 0..d {
                let mut acc = 0.0;
                for c in 0..m {
                    for e in 0..m {
                        acc += h_sig[((i * d + l) * m + c) * m + e] * za[c] * zb[e];
                    }
                }
                diff_f[(k * d + l) * m + i] = acc;
            }
        }
    }
    let mut init = vec![0.0; m];
    // D_a Y_{r₂} vanishes when r₁ = r₂, so the start value is zero in that case.
    let dsb = dsigma_blocks(model, theta, y.at(r2));
    matvec(&dsb[j2 * m * m..(j2 + 1) * m * m], da.at(r2), &mut init);
    let mut c = base.clone();
    c.drift_forcing = Some(drift_f);
    c.diffusion_forcing = Some(diff_f);
    c.initial = init;
    c
}

/// D_{(j,r)} Y as a solution path (zero before node r+1; diagonal value omitted).
fn first_path(model: &ModelSpec, theta: &[f64], fbm: &FbmPath, y: &SolutionPath, base: &ControlledCoeffs, j: usize, r: usize) -> Result<SolutionPath> {
    let (m, d) = (model.m, model.d);
    let mut sig = vec![0.0; m * d];
    model.sigma(y.at(r), theta, &mut sig);
    let mut c = base.clone();
    c.initial = (0..m).map(|i| sig[i * d + j]).collect();
    linear_solve(&c, fbm, r + 1)
}

/// Second derivative D^{j₁j₂}_{r₁r₂} Y_t along all nodes for one pair of cells.
pub fn derivative_second_pair(
    model: &ModelSpec,
    theta: &[f64],
    fbm: &FbmPath,
    y: &SolutionPath,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<SolutionPath> {
    let n = fbm.grid.steps();
    if a.1 >= n || b.1 >= n || a.0 >= model.d || b.0 >= model.d {
        return Err(Error::Argument("cell or channel index out of range".into()));
    }
    let (a, b) = if a.1 <= b.1 { (a, b) } else { (b, a) };
    let base = variation_coeffs(model, theta, y);
    let da = first_path(model, theta, fbm, y, &base, a.0, a.1)?;
    let db = first_path(model, theta, fbm, y, &base, b.0, b.1)?;
    let c = second_pair_coeffs(model, theta, fbm, y, &base, &da, &db, b);
    linear_solve(&c, fbm, b.1 + 1).map_err(|e| e.with_context(&format!("(pair r = {}, {})", a.1, b.1)))
}

/// Full order-two array; dense, so limited to small grids.
pub fn derivative_second(
    model: &ModelSpec,
    theta: &[f64],
    fbm: &FbmPath,
    y: &SolutionPath,
    _d1: &FirstDerivative,
) -> Result<SecondDerivative> {
    let (m, d) = (model.m, model.d);
    let n = fbm.grid.steps();
    let size = d * d * n * n * (n + 1) * m;
    if size > 50_000_000 {
        return Err(Error::Capability(format!("dense second-derivative array of {size} entries")));
    }
    let base = variation_coeffs(model, theta, y);
    let firsts: Vec<Vec<SolutionPath>> = (0..d)
        .map(|j| (0..n).map(|r| first_path(model, theta, fbm, y, &base, j, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut out = SecondDerivative { m, d, steps: n, data: vec![0.0; size] };
    for j1 in 0..d {
        for r1 in 0..n {
            for j2 in 0..d {
                for r2 in r1..n {
                    let c = second_pair_coeffs(model, theta, fbm, y, &base, &firsts[j1][r1], &firsts[j2][r2], (j2, r2));
                    let z = linear_solve(&c, fbm, r2 + 1)?;
                    for t in r2 + 1..=n {
                        let o1 = out.offset(j1, r1, j2, r2, t);
                        let o2 = out.offset(j2, r2, j1, r1, t);
                        out.data[o1..o1 + m].copy_from_slice(z.at(t));
                        out.data[o2..o2 + m].copy_from_slice(z.at(t));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Scalar-model derivative tensors at one target node t, over cells r < t:
/// u_a = D_aY_t, u2_{ab} = D²_{ab}Y_t, u3_{abc} = D³_{abc}Y_t (dense, row-major).
#[derive(Debug, Clone)]
pub struct ScalarTensors {
    pub t: usize,
    pub u: Vec<f64>,
    pub u2: Vec<f64>,
    pub u3: Option<Vec<f64>>,
}

/// Time-marching computation of the scalar derivative tensors at node t.
/// `order` is 2 or 3.
pub fn scalar_tensors(model: &ModelSpec, theta: &[f64], fbm: &FbmPath, y: &SolutionPath, t: usize, order: usize) -> Result<ScalarTensors> {
    if model.m != 1 || model.d != 1 {
        return Err(Error::Capability("derivative tensors are implemented for scalar models".into()));
    }
    if t == 0 || t > fbm.grid.steps() {
        return Err(Error::Argument(format!("target node {t} out of range")));
    }
    let dt = fbm.grid.dt();
    let mut u = vec![0.0; t];
    let mut u2 = vec![0.0; t * t];
    let third = order >= 3;
    let mut u3 = if third { vec![0.0; t * t * t] } else { Vec::new() };
    let (mut mu1, mut s0, mut s1, mut mu2, mut s2, mut mu3, mut s3) = ([0.0], [0.0], [0.0], [0.0], [0.0], [0.0], [0.0]);
    for k in 0..t {
        let yk = y.at(k);
        let xi = fbm.increment(0, k);
        model.dmu(yk, theta, &mut mu1);
        model.sigma(yk, theta, &mut s0);
        model.dsigma(yk, theta, &mut s1);
        model.d2mu(yk, theta, &mut mu2);
        model.d2sigma(yk, theta, &mut s2);
        if third && !model.d3(yk, theta, &mut mu3, &mut s3) {
            return Err(Error::Capability("model lacks third derivatives needed for depth-two weights".into()));
        }
        let a = 1.0 + mu1[0] * dt + s1[0] * xi;
        let b2 = mu2[0] * dt + s2[0] * xi;
        let b3 = mu3[0] * dt + s3[0] * xi;
        // third order first: it reads the old first and second order values
        if third {
            for p in 0..k {
                for q in 0..k {
                    for r in 0..k {
                        let i = (p * t + q) * t + r;
                        u3[i] = a * u3[i]
                            + b2 * (u[p] * u2[q * t + r] + u[q] * u2[p * t + r] + u[r] * u2[p * t + q])
                            + b3 * u[p] * u[q] * u[r];
                    }
                }
            }
            for p in 0..k {
                for q in 0..k {
                    let v = s2[0] * u[p] * u[q] + s1[0] * u2[p * t + q];
                    u3[(p * t + q) * t + k] = v;
                    u3[(p * t + k) * t + q] = v;
                    u3[(k * t + p) * t + q] = v;
                }
            }
        }
        for p in 0..k {
            for q in 0..k {
                let i = p * t + q;
                u2[i] = a * u2[i] + b2 * u[p] * u[q];
            }
        }
        for p in 0..k {
            let v = s1[0] * u[p];
            u2[p * t + k] = v;
            u2[k * t + p] = v;
        }
        for p in 0..k {
            u[p] *= a;
        }
        u[k] = s0[0];
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k + 1, context: " (derivative tensors)".into() });
        }
    }
    Ok(ScalarTensors { t, u, u2, u3: third.then_some(u3) })
}
