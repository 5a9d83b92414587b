use rayon::prelude::*;

use fracinfer::fbm::{CellCovariance, FbmGenerator, FbmPath, HurstParam, TimeGrid};
use fracinfer::likelihood::*;
use fracinfer::malliavin::weights::{flat_increments, gaussian_functionals};
use fracinfer::malliavin::{derivative_first, gaussian_kernels, grad_derivative_first, theta_gradient, weight_poly, WeightPoly};
use fracinfer::models::{get_model, ModelSpec};
use fracinfer::pathwise::euler_solve;
use fracinfer::rng::stream_seed;
use fracinfer::stats::{ls_fit, mean_se};

fn hp(h: f64) -> HurstParam {
    HurstParam::new(h).unwrap()
}

/// Weight kernels of the OU model on an M-step grid; they do not depend on the path.
struct Level {
    factor: usize,
    steps: usize,
    kern: fracinfer::malliavin::GaussianKernels,
    pw: WeightPoly,
    pv: WeightPoly,
}

fn level(model: &ModelSpec, theta: &[f64], h: f64, steps: usize, reference: usize) -> Level {
    let grid = TimeGrid::new(1.0, steps).unwrap();
    let zero = FbmPath::from_increments(grid, hp(h), 0, &[vec![0.0; steps]]);
    let y = euler_solve(model, theta, &zero, &[0.0]).unwrap();
    let d1 = derivative_first(model, theta, &zero, &y).unwrap();
    let gy = theta_gradient(model, theta, &zero, &y).unwrap();
    let gd = grad_derivative_first(model, theta, &zero, &y, &gy, &d1).unwrap();
    let kern = gaussian_kernels(&d1, Some(&gd), &CellCovariance::new(&grid, hp(h)), steps).unwrap();
    let pw = weight_poly(&kern, &[0]).unwrap();
    let pv = weight_poly(&kern, &[0, 0]).unwrap();
    Level { factor: reference / steps, steps, kern, pw, pv }
}

/// (Ŵ, V̂) per level from the same fine paths, with the upper-tail relation.
fn terms_by_level(levels: &[Level], h: f64, x: f64, n: usize) -> Vec<(f64, f64)> {
    let lambda = 0.5;
    let model = get_model("fou", &[lambda]).unwrap();
    let reference = levels.iter().map(|l| l.steps).max().unwrap();
    let gen = FbmGenerator::new(TimeGrid::new(1.0, reference).unwrap(), hp(h)).unwrap();
    let per_path: Vec<Vec<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let fine = gen.path(1, stream_seed(91, 0, k as u64));
            levels
                .iter()
                .map(|l| {
                    let b = fine.subsample(l.factor).unwrap();
                    let y = euler_solve(&model, &[lambda], &b, &[0.0]).unwrap();
                    let gy = theta_gradient(&model, &[lambda], &b, &y).unwrap()[0].terminal()[0];
                    let (xs, gx) = gaussian_functionals(&l.kern, &flat_increments(&b, l.steps));
                    let yt = y.terminal()[0];
                    let ind = if yt > x { 1.0 } else { 0.0 };
                    let w = ind * l.pw.value(&xs);
                    let v = gy * ind * l.pv.value(&xs) + (yt - x).max(0.0) * l.pv.grad_value(0, &xs, &gx[0]);
                    (w, v)
                })
                .collect()
        })
        .collect();
    (0..levels.len())
        .map(|j| {
            let w: f64 = per_path.iter().map(|p| p[j].0).sum::<f64>() / n as f64;
            let v: f64 = per_path.iter().map(|p| p[j].1).sum::<f64>() / n as f64;
            (w, v)
        })
        .collect()
}

fn slope(steps: &[usize], errs: &[f64]) -> f64 {
    let lx: Vec<f64> = steps.iter().map(|&m| (m as f64).ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    ls_fit(&lx, &ly).1
}

#[test]
fn density_and_score_discretization_rates() {
    // h = 0.75 admits γ = 0.7, target exponent 2γ - 1 = 0.4
    let (h, gamma) = (0.75, 0.7);
    let model = get_model("fou", &[0.5]).unwrap();
    let reference = 1 << 12;
    let steps: Vec<usize> = (5..=9).map(|k| 1 << k).collect();
    let mut levels: Vec<Level> = steps.iter().map(|&m| level(&model, &[0.5], h, m, reference)).collect();
    levels.push(level(&model, &[0.5], h, reference, reference));
    let t = terms_by_level(&levels, h, 0.3, 20_000);
    let (wr, vr) = t[steps.len()];
    let w_err: Vec<f64> = t[..steps.len()].iter().map(|(w, _)| (w - wr).abs()).collect();
    let s_err: Vec<f64> = t[..steps.len()].iter().map(|(w, v)| (v / w - vr / wr).abs()).collect();
    let bound = -(2.0 * gamma - 1.0) + 0.2;
    let (sw, ss) = (slope(&steps, &w_err), slope(&steps, &s_err));
    assert!(sw <= bound, "density slope {sw}: {w_err:?}");
    assert!(ss <= bound, "score slope {ss}: {s_err:?}");
}

#[test]
fn monte_carlo_se_scales_with_inverse_root_n() {
    let (lambda, h) = (0.5, 0.6);
    let model = get_model("fou", &[lambda]).unwrap();
    let cfg = EngineConfig { tail: TailSide::Auto, ..EngineConfig::new(hp(h), 12) };
    let ses: Vec<f64> = (0..5)
        .map(|k| {
            let budget = Budget::new(32, 4000 << k, 0.55, hp(h)).unwrap();
            estimate_density(&model, &[lambda], &[0.0], 1.0, &[0.2], DensityRelation::Indicator, budget, cfg).unwrap().se.unwrap()
        })
        .collect();
    for w in ses.windows(2) {
        let r = w[1] / w[0];
        assert!((r - 0.5f64.sqrt()).abs() <= 0.2 * 0.5f64.sqrt(), "{ses:?}");
    }
}

#[test]
fn score_at_truth_is_centred() {
    // n = 1: y ~ Y_1 under λ, score evaluated at λ; the mean over data sets
    // is zero up to Monte-Carlo and ratio bias
    let (lambda, h) = (0.5, 0.6);
    let model = get_model("fou", &[lambda]).unwrap();
    let grid = TimeGrid::new(1.0, 32).unwrap();
    let gen = FbmGenerator::new(grid, hp(h)).unwrap();
    let budget = Budget::new(32, 5000, 0.55, hp(h)).unwrap();
    let cfg = EngineConfig { tail: TailSide::Auto, escalations: 3, ..EngineConfig::new(hp(h), 0) };
    let scores: Vec<f64> = (0..50u64)
        .map(|r| {
            let y = euler_solve(&model, &[lambda], &gen.path(1, stream_seed(5, 1, r)), &[0.0]).unwrap();
            let obs = Observations::new(vec![1.0], vec![y.terminal().to_vec()], vec![0.0]).unwrap();
            let c = EngineConfig { seed: stream_seed(5, 2, r), ..cfg };
            score(&model, &[lambda], &obs, budget, c).unwrap().score[0]
        })
        .collect();
    let (m, se) = mean_se(&scores);
    assert!(m.abs() < 3.0 * se.unwrap(), "{m} ± {se:?}");
}
