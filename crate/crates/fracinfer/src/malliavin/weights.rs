//! Malliavin weights H_{(j₁…jₙ)}(Y_t) = U_{jₙ} ∘ … ∘ U_{j₁}(1) with
//!
//!   U_p(G) = δ(G hᵖ),   hᵖ = Σ_k η^{pk}_t D Y^k_t,
//!   δ(u) = Σ_a u_a ΔB_a - Σ_{a,b} D_b u_a C_{ab}
//!
//! where a, b run over (channel, cell) pairs before t and C is the cell
//! covariance (block diagonal across channels). The discrete δ is the exact
//! adjoint of the increment derivative, so E[δ(u)] = 0 holds on the grid.
//!
//! For linear drift with additive noise the directions hᵖ are deterministic and
//! every weight is a polynomial in Xᵖ = W(hᵖ):
//!
//!   U_p(K) = Xᵖ K - Σ_q ⟨h^q, hᵖ⟩ ∂_q K.
//!
//! For scalar nonlinear models the weights are built from the derivative
//! tensors of Y_t up to order three.

use std::collections::BTreeMap;

use super::derivatives::{scalar_tensors, FirstDerivative};
use super::matrix::{grad_inverse, invert_spd};
use crate::error::{Error, Result};
use crate::fbm::{CellCovariance, FbmPath};
use crate::models::ModelSpec;
use crate::pathwise::SolutionPath;

/// A scalar random variable with its first (and optionally second) Malliavin derivative
/// over the flattened (channel, cell) index.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub value: f64,
    pub grad: Option<Vec<f64>>,
    /// Row-major, hess[a·n + b] = D_a D_b.
    pub hess: Option<Vec<f64>>,
}

impl Kernel {
    pub fn constant(value: f64, n: usize) -> Self {
        Kernel { value, grad: Some(vec![0.0; n]), hess: Some(vec![0.0; n * n]) }
    }
}

/// Direction process h with its Malliavin derivatives: dh[b·n + a] = D_a h_b and
/// d2h[(b·n + c)·n + a] = D_a D_c h_b. `None` derivatives with `deterministic`
/// set mean identically zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QKernel {
    pub h: Vec<f64>,
    pub deterministic: bool,
    pub dh: Option<Vec<f64>>,
    pub d2h: Option<Vec<f64>>,
}

impl QKernel {
    pub fn deterministic(h: Vec<f64>) -> Self {
        QKernel { h, deterministic: true, dh: None, d2h: None }
    }
}

/// Block-diagonal covariance over the flattened index a = j·t + r.
struct FlatCov<'a> {
    cov: &'a CellCovariance,
    t: usize,
}

impl FlatCov<'_> {
    #[inline]
    fn at(&self, a: usize, b: usize) -> f64 {
        if a / self.t == b / self.t {
            self.cov.at(a % self.t, b % self.t)
        } else {
            0.0
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(v.len());
        for blk in v.chunks(self.t) {
            out.extend(self.cov.apply(blk));
        }
        out
    }
}

/// One level of U: U(G) = δ(G h). The result carries its first derivative when
/// G has a second derivative and h is deterministic or has both derivative orders.
pub fn skorohod_u(g: &Kernel, q: &QKernel, cov: &CellCovariance, t: usize, increments: &[f64]) -> Result<Kernel> {
    let n = q.h.len();
    if increments.len() != n || n % t != 0 {
        return Err(Error::Argument("increments do not match the kernel size".into()));
    }
    let c = FlatCov { cov, t };
    let h = &q.h;
    let gg = g
        .grad
        .as_ref()
        .ok_or_else(|| Error::Capability("running kernel lacks its Malliavin derivative".into()))?;
    if !q.deterministic && q.dh.is_none() {
        return Err(Error::Capability("direction process lacks its Malliavin derivative".into()));
    }
    let w: f64 = h.iter().zip(increments).map(|(a, b)| a * b).sum();
    let ch = c.apply(h);
    // Σ_{b,c} C_{bc} D_c G h_b = ⟨DG, C h⟩
    let dg_ch: f64 = gg.iter().zip(&ch).map(|(a, b)| a * b).sum();
    // Σ_{b,c} C_{bc} D_c h_b
    let trace = match &q.dh {
        Some(dh) if !q.deterministic => {
            let mut acc = 0.0;
            for b in 0..n {
                for cc in 0..n {
                    let cb = c.at(b, cc);
                    if cb != 0.0 {
                        acc += cb * dh[b * n + cc];
                    }
                }
            }
            acc
        }
        _ => 0.0,
    };
    let value = g.value * w - dg_ch - g.value * trace;

    let can_grad = g.hess.is_some() && (q.deterministic || (q.dh.is_some() && q.d2h.is_some()));
    let grad = if can_grad {
        let hess = g.hess.as_ref().unwrap();
        let mut out = vec![0.0; n];
        // H·Ch term: Σ_{b,c} C_{bc} D²_{ca}G h_b = (hess · Ch)_a
        for a in 0..n {
            let mut acc = g.value * h[a] + gg[a] * w;
            let mut s = 0.0;
            for b in 0..n {
                s += hess[a * n + b] * ch[b];
            }
            acc -= s;
            out[a] = acc;
        }
        if !q.deterministic {
            let dh = q.dh.as_ref().unwrap();
            let d2h = q.d2h.as_ref().unwrap();
            // C·DG
            let cdg = c.apply(gg);
            for (a, o) in out.iter_mut().enumerate() {
                // G Σ_b D_a h_b ξ_b
                let mut acc = 0.0;
                for b in 0..n {
                    acc += dh[b * n + a] * increments[b];
                }
                *o += g.value * acc;
                // Σ_{b,c} C_{bc} D_aG D_c h_b = D_aG · trace
                *o -= gg[a] * trace;
                // Σ_{b,c} C_{bc} D_cG D_a h_b = Σ_b (C DG)_b D_a h_b
                let mut s = 0.0;
                for b in 0..n {
                    s += cdg[b] * dh[b * n + a];
                }
                *o -= s;
                // G Σ_{b,c} C_{bc} D_a D_c h_b
                let mut s2 = 0.0;
                for b in 0..n {
                    for cc in 0..n {
                        let cb = c.at(b, cc);
                        if cb != 0.0 {
                            s2 += cb * d2h[(b * n + cc) * n + a];
                        }
                    }
                }
                *o -= g.value * s2;
            }
        }
        Some(out)
    } else {
        None
    };
    Ok(Kernel { value, grad, hess: None })
}

/// Polynomial in m variables with real coefficients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussPoly {
    pub m: usize,
    pub terms: BTreeMap<Vec<u8>, f64>,
}

impl GaussPoly {
    pub fn constant(m: usize, c: f64) -> Self {
        let mut terms = BTreeMap::new();
        if c != 0.0 {
            terms.insert(vec![0; m], c);
        }
        GaussPoly { m, terms }
    }

    pub fn zero(m: usize) -> Self {
        GaussPoly { m, terms: BTreeMap::new() }
    }

    pub fn degree(&self) -> usize {
        self.terms.keys().map(|e| e.iter().map(|&x| x as usize).sum()).max().unwrap_or(0)
    }

    pub fn mul_var(&self, p: usize) -> Self {
        let mut out = GaussPoly::zero(self.m);
        for (e, c) in &self.terms {
            let mut e2 = e.clone();
            e2[p] += 1;
            *out.terms.entry(e2).or_insert(0.0) += c;
        }
        out
    }

    pub fn diff(&self, p: usize) -> Self {
        let mut out = GaussPoly::zero(self.m);
        for (e, c) in &self.terms {
            if e[p] > 0 {
                let mut e2 = e.clone();
                let k = e2[p] as f64;
                e2[p] -= 1;
                *out.terms.entry(e2).or_insert(0.0) += c * k;
            }
        }
        out
    }

    pub fn add_scaled(&mut self, other: &GaussPoly, s: f64) {
        if s == 0.0 {
            return;
        }
        for (e, c) in &other.terms {
            *self.terms.entry(e.clone()).or_insert(0.0) += s * c;
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * e.iter().zip(x).map(|(&k, v)| v.powi(k as i32)).product::<f64>())
            .sum()
    }
}

/// θ-level objects of the linear-additive class at a target node t. The
/// directions hᵖ are stored over the flattened (channel, cell) index.
#[derive(Debug, Clone)]
pub struct GaussianKernels {
    pub t: usize,
    pub m: usize,
    pub d: usize,
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
    pub dirs: Vec<Vec<f64>>,
    /// G_{qp} = ⟨h^q, hᵖ⟩ (m×m)
    pub gram: Vec<f64>,
    pub grad_gamma: Vec<Vec<f64>>,
    pub grad_eta: Vec<Vec<f64>>,
    /// q × m directions ∇_l hᵖ
    pub grad_dirs: Vec<Vec<Vec<f64>>>,
    pub grad_gram: Vec<Vec<f64>>,
}

pub fn flat_kernel(d1: &FirstDerivative, i: usize, t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d1.d * t);
    for j in 0..d1.d {
        out.extend(d1.kernel(i, j, t));
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn combine(coefs: &[f64], vecs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vecs[0].len()];
    for (c, v) in coefs.iter().zip(vecs) {
        if *c != 0.0 {
            for (o, x) in out.iter_mut().zip(v) {
                *o += c * x;
            }
        }
    }
    out
}

pub fn gaussian_kernels(
    d1: &FirstDerivative,
    grad_d1: Option<&[FirstDerivative]>,
    cov: &CellCovariance,
    t: usize,
) -> Result<GaussianKernels> {
    let m = d1.m;
    let fc = FlatCov { cov, t };
    let dk: Vec<Vec<f64>> = (0..m).map(|i| flat_kernel(d1, i, t)).collect();
    let cdk: Vec<Vec<f64>> = dk.iter().map(|v| fc.apply(v)).collect();
    let mut gamma = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            gamma[i * m + k] = dot(&dk[i], &cdk[k]);
        }
    }
    let eta = invert_spd(&gamma, m, t)?;
    let dirs: Vec<Vec<f64>> = (0..m).map(|p| combine(&eta[p * m..(p + 1) * m], &dk)).collect();
    let cdirs: Vec<Vec<f64>> = (0..m).map(|p| combine(&eta[p * m..(p + 1) * m], &cdk)).collect();
    let mut gram = vec![0.0; m * m];
    for a in 0..m {
        for b in 0..m {
            gram[a * m + b] = dot(&dirs[a], &cdirs[b]);
        }
    }
    let mut out = GaussianKernels {
        t,
        m,
        d: d1.d,
        gamma,
        eta,
        dirs,
        gram,
        grad_gamma: vec![],
        grad_eta: vec![],
        grad_dirs: vec![],
        grad_gram: vec![],
    };
    if let Some(gd) = grad_d1 {
        for g in gd {
            let gk: Vec<Vec<f64>> = (0..m).map(|i| flat_kernel(g, i, t)).collect();
            let cgk: Vec<Vec<f64>> = gk.iter().map(|v| fc.apply(v)).collect();
            let mut gg = vec![0.0; m * m];
            for i in 0..m {
                for k in 0..m {
                    gg[i * m + k] = dot(&gk[i], &cdk[k]) + dot(&dk[i], &cgk[k]);
                }
            }
            let ge = grad_inverse(&out.eta, &gg, m);
            let mut gdirs = Vec::with_capacity(m);
            let mut cgdirs = Vec::with_capacity(m);
            for p in 0..m {
                let mut v = combine(&ge[p * m..(p + 1) * m], &dk);
                let w = combine(&out.eta[p * m..(p + 1) * m], &gk);
                v.iter_mut().zip(&w).for_each(|(a, b)| *a += b);
                let mut cv = combine(&ge[p * m..(p + 1) * m], &cdk);
                let cw = combine(&out.eta[p * m..(p + 1) * m], &cgk);
                cv.iter_mut().zip(&cw).for_each(|(a, b)| *a += b);
                gdirs.push(v);
                cgdirs.push(cv);
            }
            let mut ggram = vec![0.0; m * m];
            for a in 0..m {
                for b in 0..m {
                    ggram[a * m + b] = dot(&gdirs[a], &cdirs[b]) + dot(&out.dirs[a], &cgdirs[b]);
                }
            }
            out.grad_gamma.push(gg);
            out.grad_eta.push(ge);
            out.grad_dirs.push(gdirs);
            out.grad_gram.push(ggram);
        }
    }
    Ok(out)
}

/// Weight polynomial in X together with its coefficient-wise θ-derivatives.
#[derive(Debug, Clone)]
pub struct WeightPoly {
    pub tuple: Vec<usize>,
    pub poly: GaussPoly,
    /// ∂_p poly
    pub partials: Vec<GaussPoly>,
    /// coefficient derivative per parameter
    pub grad: Vec<GaussPoly>,
    /// running polynomials after each level
    pub levels: Vec<GaussPoly>,
}

pub fn weight_poly(k: &GaussianKernels, tuple: &[usize]) -> Result<WeightPoly> {
    let m = k.m;
    if tuple.iter().any(|&p| p >= m) {
        return Err(Error::Argument(format!("weight index outside 0..{m}")));
    }
    let nq = k.grad_gram.len();
    let mut poly = GaussPoly::constant(m, 1.0);
    let mut grad = vec![GaussPoly::zero(m); nq];
    let mut levels = Vec::with_capacity(tuple.len());
    for &p in tuple {
        let mut next = poly.mul_var(p);
        let mut gnext: Vec<GaussPoly> = grad.iter().map(|g| g.mul_var(p)).collect();
        for qq in 0..m {
            let dq = poly.diff(qq);
            next.add_scaled(&dq, -k.gram[qq * m + p]);
            for l in 0..nq {
                gnext[l].add_scaled(&dq, -k.grad_gram[l][qq * m + p]);
                gnext[l].add_scaled(&grad[l].diff(qq), -k.gram[qq * m + p]);
            }
        }
        poly = next;
        grad = gnext;
        levels.push(poly.clone());
    }
    let partials = (0..m).map(|p| poly.diff(p)).collect();
    Ok(WeightPoly { tuple: tuple.to_vec(), poly, partials, grad, levels })
}

/// Per-path linear functionals Xᵖ = W(hᵖ) and ∇_lXᵖ = W(∇_l hᵖ).
pub fn gaussian_functionals(k: &GaussianKernels, increments: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let x = k.dirs.iter().map(|h| dot(h, increments)).collect();
    let gx = k.grad_dirs.iter().map(|gd| gd.iter().map(|h| dot(h, increments)).collect()).collect();
    (x, gx)
}

impl WeightPoly {
    pub fn value(&self, x: &[f64]) -> f64 {
        self.poly.eval(x)
    }

    /// d/dθ_l of the weight given X and ∇_lX.
    pub fn grad_value(&self, l: usize, x: &[f64], gx: &[f64]) -> f64 {
        let mut v = self.grad[l].eval(x);
        for (p, dp) in self.partials.iter().enumerate() {
            v += dp.eval(x) * gx[p];
        }
        v
    }
}

/// Increments of the cells before t, flattened as (channel, cell).
pub fn flat_increments(fbm: &FbmPath, t: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(fbm.dim() * t);
    for j in 0..fbm.dim() {
        out.extend_from_slice(&fbm.increments(j)[..t]);
    }
    out
}

/// H_(1) and optionally H_(1,1) of a scalar model at node t; the first with its
/// Malliavin derivative.
pub fn scalar_weights(
    model: &ModelSpec,
    theta: &[f64],
    fbm: &FbmPath,
    y: &SolutionPath,
    cov: &CellCovariance,
    t: usize,
    depth: usize,
) -> Result<Vec<Kernel>> {
    if depth == 0 || depth > 2 {
        return Err(Error::Capability(format!("scalar nonlinear weights support depth 1 or 2, not {depth}")));
    }
    let tens = scalar_tensors(model, theta, fbm, y, t, depth + 1)?;
    let u = &tens.u;
    let u2 = &tens.u2;
    let cu = cov.apply(u);
    let gamma = dot(u, &cu);
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Singular { node: t, cond: f64::INFINITY });
    }
    let eta = 1.0 / gamma;
    // Dγ = 2 U2 Cu
    let dgam: Vec<f64> = (0..t).map(|a| 2.0 * dot(&u2[a * t..(a + 1) * t], &cu)).collect();
    let deta: Vec<f64> = dgam.iter().map(|v| -eta * eta * v).collect();
    let h: Vec<f64> = u.iter().map(|v| eta * v).collect();
    // dh[b·t + a] = D_a h_b = Dη_a u_b + η U2_{ba}
    let mut dh = vec![0.0; t * t];
    for b in 0..t {
        for a in 0..t {
            dh[b * t + a] = deta[a] * u[b] + eta * u2[b * t + a];
        }
    }
    let incs = flat_increments(fbm, t);
    let q1 = if depth == 1 {
        QKernel { h, deterministic: false, dh: Some(dh), d2h: None }
    } else {
        let u3 = tens.u3.as_ref().expect("third-order tensor requested");
        // D²γ_{ab} = 2[(U3·Cu)_{ab} + (U2 C U2)_{ab}]
        let mut d2gam = vec![0.0; t * t];
        let cu2: Vec<Vec<f64>> = (0..t).map(|b| cov.apply(&u2[b * t..(b + 1) * t])).collect();
        for a in 0..t {
            for b in 0..t {
                let s3 = dot(&u3[(a * t + b) * t..(a * t + b + 1) * t], &cu);
                let s2 = dot(&u2[a * t..(a + 1) * t], &cu2[b]);
                d2gam[a * t + b] = 2.0 * (s3 + s2);
            }
        }
        // D²η_{ab} = 2η³ Dγ_a Dγ_b - η² D²γ_{ab}
        let mut d2eta = vec![0.0; t * t];
        for a in 0..t {
            for b in 0..t {
                d2eta[a * t + b] = 2.0 * eta.powi(3) * dgam[a] * dgam[b] - eta * eta * d2gam[a * t + b];
            }
        }
        // d2h[(b·t + c)·t + a] = D_a D_c h_b
        let mut d2h = vec![0.0; t * t * t];
        for b in 0..t {
            for c in 0..t {
                for a in 0..t {
                    d2h[(b * t + c) * t + a] = d2eta[c * t + a] * u[b]
                        + deta[c] * u2[b * t + a]
                        + deta[a] * u2[b * t + c]
                        + eta * u3[(b * t + c) * t + a];
                }
            }
        }
        QKernel { h, deterministic: false, dh: Some(dh), d2h: Some(d2h) }
    };
    let one = Kernel::constant(1.0, t);
    let h1 = skorohod_u(&one, &q1, cov, t, &incs)?;
    let mut out = vec![h1];
    if depth == 2 {
        let h11 = skorohod_u(&out[0], &q1, cov, t, &incs)?;
        out.push(h11);
    }
    Ok(out)
}
