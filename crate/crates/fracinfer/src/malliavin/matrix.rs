//! Malliavin matrix γ_t, its inverse η_t and θ-derivatives.
//!
//! η is obtained by direct inversion. As a diagnostic, η̃ is integrated from the
//! factorisation η_t = J_tᵀ Γ_t⁻¹ J_t, where J is the inverse first variation
//! (J_{k+1} = J_k(I - B_k), B_k = ∂μ(Y_k)Δ + Σ_l ∂σ^{·l}(Y_k)ΔB^l_k) and Γ_t the
//! reduced matrix of v_r = J_{r+1}σ(Y_r):
//!
//!   η̃_{k+1} = (I - B_k)ᵀ [η̃_k + J_kᵀ(Γ_{k+1}⁻¹ - Γ_k⁻¹)J_k] (I - B_k).
//!
//! Dropping the B·ΔΓ⁻¹ cross terms would leave an error of order Δ^{1-2H}.
//! Its θ-derivative is propagated alongside with ∇B_k = ∇A_k.

use nalgebra::DMatrix;

use super::derivatives::{variation_matrix_gradients, FirstDerivative};
use crate::error::{Error, Result};
use crate::fbm::{CellCovariance, FbmPath};
use crate::models::ModelSpec;
use crate::pathwise::{variation_coeffs, variation_matrices, SolutionPath};

const MAX_COND: f64 = 1e12;

/// γ_t^{ii'} = Σ_j Σ_{r,r'<t} D^j_rY^i_t C_{rr'} D^j_{r'}Y^{i'}_t.
pub fn gamma_at(d1: &FirstDerivative, cov: &CellCovariance, t: usize) -> Vec<f64> {
    let m = d1.m;
    let mut g = cross_gram_at(d1, d1, cov, t);
    // exact symmetry; the two triangles differ by rounding
    for i in 0..m {
        for k in i + 1..m {
            let v = 0.5 * (g[i * m + k] + g[k * m + i]);
            g[i * m + k] = v;
            g[k * m + i] = v;
        }
    }
    g
}

/// Σ_j ⟨D^j Y^i_t (from a), D^j Y^{i'}_t (from b)⟩ as an m×m matrix.
pub fn cross_gram_at(a: &FirstDerivative, b: &FirstDerivative, cov: &CellCovariance, t: usize) -> Vec<f64> {
    let m = a.m;
    let mut g = vec![0.0; m * m];
    for j in 0..a.d {
        let kb: Vec<Vec<f64>> = (0..m).map(|i| cov.apply(&b.kernel(i, j, t))).collect();
        for i in 0..m {
            let ka = a.kernel(i, j, t);
            for i2 in 0..m {
                g[i * m + i2] += ka.iter().zip(&kb[i2]).map(|(x, y)| x * y).sum::<f64>();
            }
        }
    }
    g
}

/// γ at every node (node 0 is the zero matrix).
pub fn malliavin_matrix(d1: &FirstDerivative, cov: &CellCovariance) -> Vec<Vec<f64>> {
    (0..=d1.steps)
        .map(|t| if t == 0 { vec![0.0; d1.m * d1.m] } else { gamma_at(d1, cov, t) })
        .collect()
}

/// Inverse of a symmetric matrix, rejecting condition numbers above 10¹².
pub fn invert_spd(g: &[f64], m: usize, node: usize) -> Result<Vec<f64>> {
    let mat = DMatrix::from_row_slice(m, m, g);
    let sym = (&mat + mat.transpose()) * 0.5;
    let ev = sym.clone().symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= MAX_COND) {
        return Err(Error::Singular { node, cond });
    }
    let inv = sym.try_inverse().ok_or(Error::Singular { node, cond })?;
    Ok(inv.transpose().as_slice().to_vec())
}

#[derive(Debug, Clone)]
pub struct InversePath {
    /// η_t by direct inversion (node 0 left as zeros).
    pub eta: Vec<Vec<f64>>,
    /// η̃_t from the recursion (zeros before the first invertible node).
    pub eta_sde: Vec<Vec<f64>>,
}

pub fn inverse_matrix_path(
    gamma: &[Vec<f64>],
    model: &ModelSpec,
    theta: &[f64],
    fbm: &FbmPath,
    y: &SolutionPath,
) -> Result<InversePath> {
    let m = model.m;
    let mut eta = vec![vec![0.0; m * m]; gamma.len()];
    for (t, g) in gamma.iter().enumerate().skip(1) {
        eta[t] = invert_spd(g, m, t)?;
    }
    let (eta_sde, _) = eta_recursion(model, theta, fbm, y, None)?;
    Ok(InversePath { eta, eta_sde })
}

fn to_mat(v: &[f64], m: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(m, m, v)
}

fn from_mat(a: &DMatrix<f64>) -> Vec<f64> {
    a.transpose().as_slice().to_vec()
}

/// The η̃ recursion and, if θ-gradients of Y are supplied, its θ-derivative.
#[allow(clippy::type_complexity)]
pub fn eta_recursion(
    model: &ModelSpec,
    theta: &[f64],
    fbm: &FbmPath,
    y: &SolutionPath,
    grad_y: Option<&[SolutionPath]>,
) -> Result<(Vec<Vec<f64>>, Option<Vec<Vec<Vec<f64>>>>)> {
    let (m, d, q) = (model.m, model.d, model.q);
    let n = fbm.grid.steps();
    let cov = CellCovariance::new(&fbm.grid, fbm.hurst);
    let amat = variation_matrices(&variation_coeffs(model, theta, y), fbm);
    let ga = grad_y.map(|g| variation_matrix_gradients(model, theta, fbm, y, g));
    let nq = if ga.is_some() { q } else { 0 };
    let eye = DMatrix::<f64>::identity(m, m);

    let mut sig = vec![0.0; m * d];
    let mut dsig = vec![0.0; m * d * m];
    let mut gsig = vec![0.0; q * m * d];

    // J_k, ∇J_k and the columns v_r (m×d) with their gradients
    let mut jk = eye.clone();
    let mut gj = vec![DMatrix::<f64>::zeros(m, m); nq];
    let mut v: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut gv: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(n); nq];
    let mut big_g = DMatrix::<f64>::zeros(m, m);
    let mut g_big_g = vec![DMatrix::<f64>::zeros(m, m); nq];
    let mut prev_inv: Option<DMatrix<f64>> = None;
    let mut g_prev_inv = vec![DMatrix::<f64>::zeros(m, m); nq];
    let mut eta = DMatrix::<f64>::zeros(m, m);
    let mut g_eta = vec![DMatrix::<f64>::zeros(m, m); nq];
    let mut out = vec![vec![0.0; m * m]; n + 1];
    let mut g_out = vec![vec![vec![0.0; m * m]; n + 1]; nq];

    for k in 0..n {
        let a_k = to_mat(&amat[k * m * m..(k + 1) * m * m], m);
        let b_k = &a_k - &eye;
        let gb: Vec<DMatrix<f64>> = (0..nq).map(|l| to_mat(&ga.as_ref().unwrap()[l][k * m * m..(k + 1) * m * m], m)).collect();
        let j_prev = jk.clone();
        let gj_prev = gj.clone();
        let step = &eye - &b_k;
        jk = &j_prev * &step;
        for l in 0..nq {
            gj[l] = &gj_prev[l] * &step - &j_prev * &gb[l];
        }
        // v_k = J_{k+1} σ(Y_k)
        let yk = y.at(k);
        model.sigma(yk, theta, &mut sig);
        let s = DMatrix::from_row_slice(m, d, &sig);
        let vk = &jk * &s;
        let mut gvk = Vec::with_capacity(nq);
        if nq > 0 {
            model.dsigma(yk, theta, &mut dsig);
            model.grad_sigma(yk, theta, &mut gsig);
            for l in 0..nq {
                let gy = grad_y.unwrap()[l].at(k);
                let mut ds = DMatrix::<f64>::zeros(m, d);
                for i in 0..m {
                    for jj in 0..d {
                        let mut acc = gsig[(l * m + i) * d + jj];
                        for e in 0..m {
                            acc += dsig[(i * d + jj) * m + e] * gy[e];
                        }
                        ds[(i, jj)] = acc;
                    }
                }
                gvk.push(&gj[l] * &s + &jk * ds);
            }
        }
        // Γ_{k+1} - Γ_k = S v_kᵀ + v_k Sᵀ + C_0 v_k v_kᵀ with S = Σ_{r<k} C_{rk} v_r
        let mut sacc = DMatrix::<f64>::zeros(m, d);
        for (r, vr) in v.iter().enumerate() {
            sacc += vr * cov.at(r, k);
        }
        let c0 = cov.at(0, 0);
        let dgam = &sacc * vk.transpose() + &vk * sacc.transpose() + &vk * vk.transpose() * c0;
        big_g += &dgam;
        for l in 0..nq {
            let mut gs = DMatrix::<f64>::zeros(m, d);
            for (r, gvr) in gv[l].iter().enumerate() {
                gs += gvr * cov.at(r, k);
            }
            let gd = &gs * vk.transpose()
                + &sacc * gvk[l].transpose()
                + &gvk[l] * sacc.transpose()
                + &vk * gs.transpose()
                + (&gvk[l] * vk.transpose() + &vk * gvk[l].transpose()) * c0;
            g_big_g[l] += gd;
        }
        v.push(vk);
        for l in 0..nq {
            gv[l].push(gvk[l].clone());
        }

        // advance η̃ from node k to k+1
        let gamma_ok = invert_spd(&from_mat(&big_g), m, k + 1).ok().map(|x| to_mat(&x, m));
        match (&prev_inv, gamma_ok) {
            (None, Some(inv)) => {
                // first invertible node: η̃ = J ᵀ Γ⁻¹ J exactly
                eta = jk.transpose() * &inv * &jk;
                for l in 0..nq {
                    let ginv = -(&inv * &g_big_g[l] * &inv);
                    g_eta[l] = gj[l].transpose() * &inv * &jk + jk.transpose() * &ginv * &jk + jk.transpose() * &inv * &gj[l];
                    g_prev_inv[l] = ginv;
                }
                prev_inv = Some(inv);
            }
            (Some(pinv), Some(inv)) => {
                let diff = &inv - pinv;
                let mid = &eta + j_prev.transpose() * &diff * &j_prev;
                let new_eta = step.transpose() * &mid * &step;
                for l in 0..nq {
                    let ginv = -(&inv * &g_big_g[l] * &inv);
                    let gdiff = &ginv - &g_prev_inv[l];
                    let gmid = &g_eta[l]
                        + gj_prev[l].transpose() * &diff * &j_prev
                        + j_prev.transpose() * &gdiff * &j_prev
                        + j_prev.transpose() * &diff * &gj_prev[l];
                    g_eta[l] = step.transpose() * &gmid * &step
                        - gb[l].transpose() * &mid * &step
                        - step.transpose() * &mid * &gb[l];
                    g_prev_inv[l] = ginv;
                }
                eta = new_eta;
                prev_inv = Some(inv);
            }
            (_, None) => {
                if prev_inv.is_some() {
                    return Err(Error::Singular { node: k + 1, cond: f64::INFINITY });
                }
            }
        }
        if prev_inv.is_some() {
            out[k + 1] = from_mat(&eta);
            for l in 0..nq {
                g_out[l][k + 1] = from_mat(&g_eta[l]);
            }
        }
    }
    Ok((out, ga.map(|_| g_out)))
}

/// ∇_l γ_t = Σ_j ⟨∇D, D⟩ + ⟨D, ∇D⟩.
pub fn grad_gamma_at(d1: &FirstDerivative, gd1: &FirstDerivative, cov: &CellCovariance, t: usize) -> Vec<f64> {
    let m = d1.m;
    let a = cross_gram_at(gd1, d1, cov, t);
    let mut out = a.clone();
    for i in 0..m {
        for k in 0..m {
            out[i * m + k] += a[k * m + i];
        }
    }
    out
}

/// -η (∇γ) η
pub fn grad_inverse(eta: &[f64], grad_gamma: &[f64], m: usize) -> Vec<f64> {
    let e = to_mat(eta, m);
    from_mat(&-(&e * to_mat(grad_gamma, m) * &e))
}
