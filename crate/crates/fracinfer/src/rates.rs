//! Grid-refinement studies of the Euler scheme against a fine reference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::{FbmGenerator, FbmPath, HurstParam, TimeGrid};
use crate::models::ModelSpec;
use crate::pathwise::{euler_solve, linear_solve, variation_coeffs, SolutionPath};
use crate::rng::stream_seed;
use crate::stats::{ls_fit, pairwise_sum};

/// Which solution is compared across grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateTarget {
    /// the Euler solution Y
    #[default]
    Euler,
    /// the first Malliavin derivative D_sY_t for s = T/4, driven by channel 0
    Derivative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateStudy {
    pub steps: Vec<usize>,
    /// root mean square over paths of the sup-norm error on the coarse nodes
    pub errors: Vec<f64>,
    /// least-squares slope of log error against log M
    pub slope: f64,
    pub reference: usize,
    pub paths: usize,
}

fn check(steps: &[usize], reference: usize, paths: usize) -> Result<()> {
    if steps.len() < 2 {
        return Err(Error::Argument("a rate study needs at least two grid sizes (slope undefined)".into()));
    }
    if paths == 0 {
        return Err(Error::Argument("a rate study needs at least one path".into()));
    }
    for &m in steps {
        if m < 4 || m % 4 != 0 || reference % m != 0 || m >= reference {
            return Err(Error::Argument(format!(
                "grid size {m} must be a multiple of 4 dividing the reference {reference} and below it"
            )));
        }
    }
    Ok(())
}

fn derivative_path(model: &ModelSpec, theta: &[f64], fbm: &FbmPath, y: &SolutionPath) -> Result<SolutionPath> {
    let n = fbm.grid.steps();
    let s = n / 4;
    let mut c = variation_coeffs(model, theta, y);
    let mut sig = vec![0.0; model.m * model.d];
    model.sigma(y.at(s), theta, &mut sig);
    c.initial = (0..model.m).map(|i| sig[i * model.d]).collect();
    linear_solve(&c, fbm, s)
}

fn solve(model: &ModelSpec, theta: &[f64], fbm: &FbmPath, a: &[f64], target: RateTarget) -> Result<SolutionPath> {
    let y = euler_solve(model, theta, fbm, a)?;
    match target {
        RateTarget::Euler => Ok(y),
        RateTarget::Derivative => derivative_path(model, theta, fbm, &y),
    }
}

/// Sup-norm errors of coarse Euler solutions against a reference on
/// `reference` steps, all driven by the same fBm sample per path.
#[allow(clippy::too_many_arguments)]
pub fn rate_study(
    model: &ModelSpec,
    theta: &[f64],
    a: &[f64],
    hurst: HurstParam,
    horizon: f64,
    steps: &[usize],
    reference: usize,
    paths: usize,
    target: RateTarget,
    seed: u64,
) -> Result<RateStudy> {
    check(steps, reference, paths)?;
    let gen = FbmGenerator::new(TimeGrid::new(horizon, reference)?, hurst)?;
    let per_path: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|k| {
            let fine = gen.path(model.d, stream_seed(seed, 0, k as u64));
            let zf = solve(model, theta, &fine, a, target)?;
            steps
                .iter()
                .map(|&m| {
                    let factor = reference / m;
                    let zc = solve(model, theta, &fine.subsample(factor)?, a, target)?;
                    let err = (0..=m)
                        .flat_map(|j| zc.at(j).iter().zip(zf.at(j * factor)).map(|(u, v)| (u - v).abs()))
                        .fold(0.0, f64::max);
                    Ok(err * err)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let errors: Vec<f64> = (0..steps.len())
        .map(|j| {
            let col: Vec<f64> = per_path.iter().map(|r| r[j]).collect();
            (pairwise_sum(&col) / paths as f64).sqrt()
        })
        .collect();
    if errors.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(Error::Degenerate("rate study produced a zero or non-finite error".into()));
    }
    let lx: Vec<f64> = steps.iter().map(|&m| (m as f64).ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (slope, _) = ls_fit(&lx, &ly);
    Ok(RateStudy { steps: steps.to_vec(), errors, slope, reference, paths })
}
