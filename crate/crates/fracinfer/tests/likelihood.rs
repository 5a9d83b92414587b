use fracinfer::fbm::{simulate_fbm, CellCovariance, HurstParam, TimeGrid};
use fracinfer::likelihood::*;
use fracinfer::malliavin::{derivative_first, gamma_at};
use fracinfer::models::{brownian_model, get_model, ModelFile, ModelSpec};
use fracinfer::pathwise::euler_solve;
use fracinfer::Error;

fn hp(h: f64) -> HurstParam {
    HurstParam::new(h).unwrap()
}

fn cfg(h: f64, seed: u64, tail: TailSide) -> EngineConfig {
    EngineConfig { tail, ..EngineConfig::new(hp(h), seed) }
}

fn ou_variance(lambda: f64, h: f64, t: f64, m: usize) -> f64 {
    let model = get_model("fou", &[lambda]).unwrap();
    let b = simulate_fbm(TimeGrid::new(t, m).unwrap(), 1, hp(h), 0).unwrap();
    let y = euler_solve(&model, &[lambda], &b, &[0.0]).unwrap();
    let d1 = derivative_first(&model, &[lambda], &b, &y).unwrap();
    gamma_at(&d1, &CellCovariance::new(&b.grid, hp(h)), m)[0]
}

fn constant_model() -> ModelSpec {
    let f = ModelFile {
        name: "still".into(),
        m: 1,
        d: 1,
        q: 1,
        drift: "zero".into(),
        drift_params: vec![],
        diffusion: "unit".into(),
        diffusion_params: vec![],
    };
    ModelSpec::from_file(&f, vec![0.3]).unwrap()
}

#[test]
fn brownian_density_at_origin() {
    let model = brownian_model(1);
    let budget = Budget::new(16, 100_000, 0.55, hp(0.6)).unwrap();
    for tail in [TailSide::Upper, TailSide::Auto] {
        let e = estimate_density(&model, &[], &[0.0], 1.0, &[0.0], DensityRelation::Indicator, budget, cfg(0.6, 1, tail)).unwrap();
        let want = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((e.value - want).abs() < 3.0 * e.se.unwrap(), "{e:?}");
    }
}

#[test]
fn far_tail_density_vanishes() {
    let model = get_model("fou", &[0.5]).unwrap();
    let budget = Budget::new(64, 20_000, 0.55, hp(0.6)).unwrap();
    let s = ou_variance(0.5, 0.6, 1.0, 64).sqrt();
    let e = estimate_density(&model, &[0.5], &[0.0], 1.0, &[10.0 * s], DensityRelation::Indicator, budget, cfg(0.6, 2, TailSide::Upper)).unwrap();
    assert!(e.value.abs() <= 3.0 * e.se.unwrap() + 1e-300, "{e:?}");
    let obs = Observations::new(vec![1.0], vec![vec![10.0 * s]], vec![0.0]).unwrap();
    let engine = ScoreEngine::new(&model, &obs, budget, cfg(0.6, 2, TailSide::Upper)).unwrap();
    let t = engine.observation_terms(&[0.5], 0).unwrap();
    assert!(t.v[0].value.abs() <= 3.0 * t.v[0].se.unwrap() + 1e-300);
    assert!(matches!(engine.score(&[0.5]), Err(Error::UnreliableScore { index: 0, .. })));
}

#[test]
fn ou_density_at_mode_and_curve() {
    let (lambda, h) = (0.5, 0.6);
    let model = get_model("fou", &[lambda]).unwrap();
    let g = ou_variance(lambda, h, 1.0, 128);
    let budget = Budget::new(128, 100_000, 0.55, hp(h)).unwrap();
    for k in -3..=3 {
        let x = 0.5 * k as f64 * g.sqrt();
        let e = estimate_density(&model, &[lambda], &[0.0], 1.0, &[x], DensityRelation::Indicator, budget, cfg(h, 3, TailSide::Auto)).unwrap();
        let want = (-x * x / (2.0 * g)).exp() / (2.0 * std::f64::consts::PI * g).sqrt();
        assert!((e.value - want).abs() < 0.05 * want, "x={x}: {} vs {want}", e.value);
    }
}

#[test]
fn single_path_has_no_standard_error() {
    let model = get_model("fou", &[0.5]).unwrap();
    let obs = Observations::new(vec![1.0], vec![vec![0.1]], vec![0.0]).unwrap();
    let budget = Budget::new(32, 1, 0.55, hp(0.6)).unwrap();
    let w = estimate_w(&model, &[0.5], &obs, 0, budget, cfg(0.6, 4, TailSide::Upper)).unwrap();
    assert!(w.value.is_finite() && w.se.is_none());
}

#[test]
fn v_matches_finite_difference_of_density() {
    let (lambda, h) = (0.5, 0.6);
    let budget = Budget::new(64, 100_000, 0.55, hp(h)).unwrap();
    for x in [0.0, 0.4] {
        let obs = Observations::new(vec![1.0], vec![vec![x]], vec![0.0]).unwrap();
        for tail in [TailSide::Upper, TailSide::Auto] {
            let model = get_model("fou", &[lambda]).unwrap();
            let e = ScoreEngine::new(&model, &obs, budget, cfg(h, 5, tail)).unwrap();
            let v = e.observation_terms(&[lambda], 0).unwrap().v[0].value;
            let eps = 1e-3;
            let fp = e.estimate_w_positive_part(&[lambda + eps], 0).unwrap().value;
            let fm = e.estimate_w_positive_part(&[lambda - eps], 0).unwrap().value;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((v - fd).abs() < 0.05 * fd.abs(), "x={x} {tail:?}: {v} vs {fd}");
        }
    }
}

#[test]
fn v_matches_analytic_derivative_of_gaussian_density() {
    let (lambda, h) = (0.5, 0.6);
    let model = get_model("fou", &[lambda]).unwrap();
    let budget = Budget::new(64, 100_000, 0.55, hp(h)).unwrap();
    let dens = |l: f64, x: f64| {
        let g = ou_variance(l, h, 1.0, 64);
        (-x * x / (2.0 * g)).exp() / (2.0 * std::f64::consts::PI * g).sqrt()
    };
    let x = 0.3;
    let want = (dens(lambda + 1e-4, x) - dens(lambda - 1e-4, x)) / 2e-4;
    let obs = Observations::new(vec![1.0], vec![vec![x]], vec![0.0]).unwrap();
    let v = estimate_v(&model, &[lambda], 0, &obs, 0, budget, cfg(h, 6, TailSide::Auto)).unwrap();
    assert!((v.value - want).abs() < 3.0 * v.se.unwrap() + 0.02 * want.abs(), "{v:?} vs {want}");
}

#[test]
fn theta_independent_model_has_zero_v() {
    let model = constant_model();
    let obs = Observations::new(vec![1.0], vec![vec![0.2]], vec![0.0]).unwrap();
    let budget = Budget::new(32, 20_000, 0.55, hp(0.7)).unwrap();
    let e = ScoreEngine::new(&model, &obs, budget, cfg(0.7, 7, TailSide::Auto)).unwrap();
    let t = e.observation_terms(&[0.3], 0).unwrap();
    assert_eq!(t.v[0].value, 0.0);
    assert_eq!(e.score(&[0.3]).unwrap().score, vec![0.0]);
}

#[test]
fn score_is_deterministic_across_thread_counts() {
    let model = get_model("linear2d", &[2.0, 4.0]).unwrap();
    let obs = Observations::new(vec![0.5, 1.0], vec![vec![0.9, 0.8], vec![0.5, 0.7]], vec![1.0, 1.0]).unwrap();
    let budget = Budget::new(20, 3000, 0.55, hp(0.7)).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| score(&model, &[2.0, 4.0], &obs, budget, cfg(0.7, 8, TailSide::Auto)))
    };
    let a = run(1);
    let b = run(3);
    let c = run(1);
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn escalation_rescues_tail_observation() {
    let model = get_model("fou", &[0.5]).unwrap();
    let s = ou_variance(0.5, 0.6, 1.0, 32).sqrt();
    let obs = Observations::new(vec![1.0], vec![vec![2.6 * s]], vec![0.0]).unwrap();
    let budget = Budget::new(32, 500, 0.55, hp(0.6)).unwrap();
    let mut c = cfg(0.6, 9, TailSide::Auto);
    let strict = ScoreEngine::new(&model, &obs, budget, c).unwrap().score(&[0.5]);
    assert!(matches!(strict, Err(Error::UnreliableScore { .. })), "{strict:?}");
    c.escalations = 3;
    let sv = ScoreEngine::new(&model, &obs, budget, c).unwrap().score(&[0.5]).unwrap();
    assert!(sv.terms[0].paths > 500 && sv.terms[0].reliable());
}

#[test]
fn score_sign_points_to_truth() {
    let (lambda, h) = (0.5, 0.6);
    let model = get_model("fou", &[lambda]).unwrap();
    // n = 20 observations spaced by 2, data on the same Euler grid
    let n = 20;
    let steps = 200;
    let grid = TimeGrid::new(40.0, steps).unwrap();
    let budget = Budget::new(steps, 500, 0.55, hp(h)).unwrap();
    let mut c = cfg(h, 0, TailSide::Auto);
    c.escalations = 3;
    let mut below = 0;
    let mut above = 0;
    let reps = 10;
    for r in 0..reps {
        let b = simulate_fbm(grid, 1, hp(h), 1000 + r).unwrap();
        let y = euler_solve(&model, &[lambda], &b, &[0.0]).unwrap();
        let times: Vec<f64> = (1..=n).map(|i| grid.node(i * steps / n)).collect();
        let values: Vec<Vec<f64>> = (1..=n).map(|i| y.at(i * steps / n).to_vec()).collect();
        let obs = Observations::new(times, values, vec![0.0]).unwrap();
        c.seed = 77 + r;
        let e = ScoreEngine::new(&model, &obs, budget, c).unwrap();
        if e.score_with(&[0.25], Unreliable::Skip).unwrap().score[0] > 0.0 {
            below += 1;
        }
        if e.score_with(&[0.9], Unreliable::Skip).unwrap().score[0] < 0.0 {
            above += 1;
        }
    }
    assert!(below > reps / 2 && above > reps / 2, "{below} {above}");
}

#[test]
fn budget_examples() {
    let r = BudgetRule::default();
    assert_eq!(allocate_budget_exponent(100, 0.75, 2.0, r).unwrap(), Allocation { paths: 100, capped: false });
    assert_eq!(allocate_budget_exponent(100, 0.75, 1.0, r).unwrap(), Allocation { paths: 1, capped: false });
    assert_eq!(allocate_budget_exponent(10, 0.6, 3.0, r).unwrap(), Allocation { paths: 1_000_000, capped: true });
    // γ̃ = T·m·(d+1) = 1·1·2
    assert_eq!(allocate_budget(100, 0.75, 1.0, 1, 1, r).unwrap().paths, 100);
    assert!(matches!(allocate_budget(100, 0.5, 1.0, 1, 1, r), Err(Error::Argument(_))));
}

#[test]
fn observation_times_must_be_nodes() {
    let model = get_model("fou", &[0.5]).unwrap();
    let obs = Observations::new(vec![0.3, 1.0], vec![vec![0.0], vec![0.0]], vec![0.0]).unwrap();
    let budget = Budget::new(4, 10, 0.55, hp(0.6)).unwrap();
    assert!(matches!(ScoreEngine::new(&model, &obs, budget, cfg(0.6, 0, TailSide::Upper)), Err(Error::Argument(_))));
    assert!(Observations::new(vec![1.0, 0.5], vec![vec![0.0], vec![0.0]], vec![0.0]).is_err());
    assert!(Budget::new(1, 10, 0.55, hp(0.6)).is_err());
    assert!(Budget::new(10, 10, 0.65, hp(0.6)).is_err());
}

#[test]
fn scalar_nonlinear_density_and_capability() {
    let model = get_model("sintanh", &[0.8]).unwrap();
    let budget = Budget::new(8, 20_000, 0.55, hp(0.7)).unwrap();
    let c = cfg(0.7, 10, TailSide::Auto);
    let a = estimate_density(&model, &[0.8], &[0.2], 1.0, &[0.4], DensityRelation::Indicator, budget, c).unwrap();
    let b = estimate_density(&model, &[0.8], &[0.2], 1.0, &[0.4], DensityRelation::PositivePart, budget, c).unwrap();
    let tol = 3.0 * (a.se.unwrap().powi(2) + b.se.unwrap().powi(2)).sqrt();
    assert!((a.value - b.value).abs() < tol, "{a:?} {b:?}");
    let obs = Observations::new(vec![1.0], vec![vec![0.4]], vec![0.2]).unwrap();
    assert!(matches!(score(&model, &[0.8], &obs, budget, c), Err(Error::Capability(_))));
}
