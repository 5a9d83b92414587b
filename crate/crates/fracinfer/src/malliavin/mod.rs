//! Per-path Malliavin calculus on the Euler grid.

pub mod derivatives;
pub mod matrix;
pub mod weights;

use crate::error::{Error, Result};
use crate::fbm::{CellCovariance, FbmPath};
use crate::models::{ModelClass, ModelSpec};
use crate::pathwise::{euler_solve, SolutionPath};

pub use derivatives::{
    derivative_first, derivative_second, derivative_second_pair, grad_derivative_first, theta_gradient,
    FirstDerivative, SecondDerivative,
};
pub use matrix::{gamma_at, grad_gamma_at, inverse_matrix_path, malliavin_matrix, InversePath};
pub use weights::{gaussian_kernels, skorohod_u, weight_poly, GaussianKernels, Kernel, QKernel, WeightPoly};

/// Derivative arrays of one driving path.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub y: SolutionPath,
    pub d1: FirstDerivative,
    pub grad_y: Vec<SolutionPath>,
    pub grad_d1: Vec<FirstDerivative>,
}

impl Bundle {
    pub fn build(model: &ModelSpec, theta: &[f64], fbm: &FbmPath, a: &[f64], with_grad: bool) -> Result<Self> {
        let y = euler_solve(model, theta, fbm, a)?;
        let d1 = derivative_first(model, theta, fbm, &y)?;
        let (grad_y, grad_d1) = if with_grad {
            let gy = theta_gradient(model, theta, fbm, &y)?;
            let gd = grad_derivative_first(model, theta, fbm, &y, &gy, &d1)?;
            (gy, gd)
        } else {
            (vec![], vec![])
        };
        Ok(Bundle { y, d1, grad_y, grad_d1 })
    }
}

/// A realised weight with the running kernels of each level.
#[derive(Debug, Clone)]
pub struct WeightValue {
    pub tuple: Vec<usize>,
    pub value: f64,
    pub levels: Vec<Kernel>,
}

fn check_tuple(model: &ModelSpec, tuple: &[usize]) -> Result<()> {
    if tuple.is_empty() || tuple.iter().any(|&p| p >= model.m) {
        return Err(Error::Argument(format!("weight tuple {tuple:?} invalid for m = {}", model.m)));
    }
    if tuple.len() > 2 * model.m {
        return Err(Error::Capability(format!("depth {} exceeds 2m = {}", tuple.len(), 2 * model.m)));
    }
    Ok(())
}

/// H_{tuple}(Y_t) on one path; indices are zero-based components.
pub fn h_weight(tuple: &[usize], model: &ModelSpec, theta: &[f64], fbm: &FbmPath, bundle: &Bundle, t: usize) -> Result<WeightValue> {
    check_tuple(model, tuple)?;
    let cov = CellCovariance::new(&fbm.grid, fbm.hurst);
    match model.class() {
        ModelClass::LinearAdditive => {
            let k = gaussian_kernels(&bundle.d1, None, &cov, t)?;
            let wp = weight_poly(&k, tuple)?;
            let incs = weights::flat_increments(fbm, t);
            let (x, _) = weights::gaussian_functionals(&k, &incs);
            let levels = wp
                .levels
                .iter()
                .map(|p| {
                    let mut grad = vec![0.0; incs.len()];
                    for (q, dir) in k.dirs.iter().enumerate() {
                        let c = p.diff(q).eval(&x);
                        grad.iter_mut().zip(dir).for_each(|(g, h)| *g += c * h);
                    }
                    Kernel { value: p.eval(&x), grad: Some(grad), hess: None }
                })
                .collect();
            Ok(WeightValue { tuple: tuple.to_vec(), value: wp.value(&x), levels })
        }
        ModelClass::ScalarNonlinear => {
            let levels = weights::scalar_weights(model, theta, fbm, &bundle.y, &cov, t, tuple.len())?;
            Ok(WeightValue { tuple: tuple.to_vec(), value: levels.last().unwrap().value, levels })
        }
        ModelClass::Unsupported => Err(Error::Capability(format!(
            "model '{}' is neither linear-additive nor scalar",
            model.name
        ))),
    }
}

/// ∇_l H_{tuple}(Y_t) on one path (linear-additive class).
pub fn grad_h_weight(
    tuple: &[usize],
    l: usize,
    model: &ModelSpec,
    fbm: &FbmPath,
    bundle: &Bundle,
    t: usize,
) -> Result<WeightValue> {
    check_tuple(model, tuple)?;
    if model.class() != ModelClass::LinearAdditive {
        return Err(Error::Capability("θ-gradients of weights need linear drift and additive noise".into()));
    }
    if bundle.grad_d1.len() != model.q || l >= model.q {
        return Err(Error::Argument("bundle lacks θ-gradients or parameter index out of range".into()));
    }
    let cov = CellCovariance::new(&fbm.grid, fbm.hurst);
    let k = gaussian_kernels(&bundle.d1, Some(&bundle.grad_d1), &cov, t)?;
    let wp = weight_poly(&k, tuple)?;
    let incs = weights::flat_increments(fbm, t);
    let (x, gx) = weights::gaussian_functionals(&k, &incs);
    Ok(WeightValue { tuple: tuple.to_vec(), value: wp.grad_value(l, &x, &gx[l]), levels: vec![] })
}

/// ∇_l η along the path: `primary` is -η∇γη from the θ-derivative of D,
/// `diagnostic` the differentiated η̃ recursion. Both are q × nodes × m².
#[derive(Debug, Clone)]
pub struct GradEta {
    pub primary: Vec<Vec<Vec<f64>>>,
    pub diagnostic: Vec<Vec<Vec<f64>>>,
}

pub fn grad_eta(model: &ModelSpec, theta: &[f64], fbm: &FbmPath, bundle: &Bundle) -> Result<GradEta> {
    let m = model.m;
    if bundle.grad_y.len() != model.q {
        return Err(Error::Argument("bundle lacks θ-gradients".into()));
    }
    let cov = CellCovariance::new(&fbm.grid, fbm.hurst);
    let n = fbm.grid.steps();
    let mut primary = vec![vec![vec![0.0; m * m]; n + 1]; model.q];
    for t in 1..=n {
        let g = gamma_at(&bundle.d1, &cov, t);
        let eta = matrix::invert_spd(&g, m, t)?;
        for l in 0..model.q {
            let gg = grad_gamma_at(&bundle.d1, &bundle.grad_d1[l], &cov, t);
            primary[l][t] = matrix::grad_inverse(&eta, &gg, m);
        }
    }
    let (_, diag) = matrix::eta_recursion(model, theta, fbm, &bundle.y, Some(&bundle.grad_y))?;
    Ok(GradEta { primary, diagnostic: diag.unwrap_or_default() })
}
