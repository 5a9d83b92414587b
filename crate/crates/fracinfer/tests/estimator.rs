use rand_distr::{Distribution, StandardNormal};

use fracinfer::estimator::*;
use fracinfer::fbm::{simulate_fbm, HurstParam, TimeGrid};
use fracinfer::likelihood::{Budget, EngineConfig, Observations, TailSide};
use fracinfer::models::get_model;
use fracinfer::pathwise::euler_solve;
use fracinfer::rng::{rng_from, stream_seed};
use fracinfer::stats::mean;
use fracinfer::Error;

fn wide() -> Bounds {
    Bounds::new(vec![-10.0], vec![10.0]).unwrap()
}

#[test]
fn deterministic_linear_root() {
    // a_k = 1/(k+1) for k = 1, 2, …
    let s = StepSchedule::new(vec![1.0], 1.0, 1.0).unwrap();
    let r = robbins_monro(|t, _, _| Ok(ScoreEval::exact(vec![t[0] - 2.0])), &[0.0], &s, 200, &wide()).unwrap();
    assert_eq!(r.trace.len(), 201);
    let last = r.trace.last().unwrap()[0];
    assert!((last - 2.0).abs() < 1e-2, "{last}");
    // the tail average trails the last iterate on a monotone path
    assert!((r.estimate[0] - 2.0).abs() < 1.5e-2, "{:?}", r.estimate);
}

#[test]
fn noisy_linear_root() {
    let s = StepSchedule::new(vec![1.0], 1.0, 1.0).unwrap();
    let est: Vec<f64> = (0..20)
        .map(|rep| {
            let mut rng = rng_from(stream_seed(3, rep, 0));
            let r = robbins_monro(
                |t, _, _| {
                    let xi: f64 = StandardNormal.sample(&mut rng);
                    Ok(ScoreEval::exact(vec![t[0] - 2.0 + xi]))
                },
                &[0.0],
                &s,
                10_000,
                &wide(),
            )
            .unwrap();
            r.estimate[0]
        })
        .collect();
    assert!((mean(&est) - 2.0).abs() < 0.05, "{}", mean(&est));
}

#[test]
fn schedule_validation_examples() {
    assert!(validate_schedule(&StepSchedule { a0: vec![1.0], offset: 10.0, rho: 1.0 }).is_ok());
    assert!(validate_schedule(&StepSchedule { a0: vec![1.0], offset: 10.0, rho: 0.4 }).is_err());
    assert!(validate_schedule(&StepSchedule { a0: vec![0.0], offset: 10.0, rho: 0.7 }).is_err());
    assert!(StepSchedule::new(vec![1.0], 10.0, 1.2).is_err());
    let s = StepSchedule::new(vec![2.0, 0.5], 10.0, 1.0).unwrap();
    assert_eq!(s.step(0, 1), 0.05);
}

#[test]
fn iterates_stay_in_the_box() {
    let b = Bounds::new(vec![0.0, 1.0], vec![1.0, 2.0]).unwrap();
    let s = StepSchedule::new(vec![5.0], 1.0, 0.7).unwrap();
    let mut rng = rng_from(4);
    let r = robbins_monro(
        |_, _, _| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let c: f64 = StandardNormal.sample(&mut rng);
            Ok(ScoreEval::exact(vec![10.0 * a, 10.0 * c]))
        },
        &[0.5, 1.5],
        &s,
        200,
        &b,
    )
    .unwrap();
    assert!(r.trace.iter().all(|t| b.contains(t)));
    assert!(b.contains(&r.estimate));
}

#[test]
fn failures_are_retried_once_then_reported() {
    let s = StepSchedule::default();
    let mut calls = 0;
    let r = robbins_monro(
        |t, k, retry| {
            calls += 1;
            match (k, retry) {
                (3, false) => Err(Error::Degenerate("boom".into())),
                (5, _) => Ok(ScoreEval::exact(vec![f64::NAN])),
                _ => Ok(ScoreEval::exact(vec![t[0] - 1.0])),
            }
        },
        &[0.0],
        &s,
        10,
        &wide(),
    )
    .unwrap();
    assert_eq!(r.retries, 2);
    assert_eq!(r.trace.len(), 5);
    assert!(matches!(r.failure, Some(Error::Degenerate(_))));
    assert_eq!(calls, 7);
    assert!(robbins_monro(|_, _, _| Ok(ScoreEval::exact(vec![0.0])), &[20.0], &s, 10, &wide()).is_err());
    assert!(robbins_monro(|_, _, _| Ok(ScoreEval::exact(vec![0.0])), &[0.0], &s, 0, &wide()).is_err());
}

fn small_ou(seed: u64) -> (fracinfer::models::ModelSpec, Observations) {
    let model = get_model("fou", &[0.5]).unwrap();
    let grid = TimeGrid::new(20.0, 40).unwrap();
    let b = simulate_fbm(grid, 1, HurstParam::new(0.6).unwrap(), seed).unwrap();
    let y = euler_solve(&model, &[0.5], &b, &[0.0]).unwrap();
    let times = (1..=10).map(|i| grid.node(4 * i)).collect();
    let values = (1..=10).map(|i| y.at(4 * i).to_vec()).collect();
    (model, Observations::new(times, values, vec![0.0]).unwrap())
}

fn small_config(seed: u64) -> EstimatorConfig {
    let h = HurstParam::new(0.6).unwrap();
    EstimatorConfig {
        theta0: vec![1.0],
        bounds: Bounds::new(vec![0.01], vec![10.0]).unwrap(),
        schedule: StepSchedule::new(vec![0.1], 10.0, 1.0).unwrap(),
        iterations: 5,
        budget: Budget::new(40, 200, 0.55, h).unwrap(),
        engine: EngineConfig { tail: TailSide::Auto, escalations: 2, ..EngineConfig::new(h, seed) },
        unreliable: fracinfer::likelihood::Unreliable::Skip,
    }
}

#[test]
fn estimation_is_deterministic() {
    let (model, obs) = small_ou(1);
    let a = estimate(&model, &obs, &small_config(9)).unwrap();
    let b = estimate(&model, &obs, &small_config(9)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.scores, b.scores);
    assert_eq!(a.estimate, b.estimate);
    let c = estimate(&model, &obs, &small_config(10)).unwrap();
    assert_ne!(a.trace, c.trace);
}

#[test]
fn estimates_concentrate_near_truth() {
    // reduced OU preset: fewer paths and iterations
    let mut p = preset("ou").unwrap();
    p.paths = 200;
    p.iterations = 30;
    p.replications = 5;
    let s = replicate(&p, 11).unwrap();
    let mut d: Vec<f64> = s.reports.iter().map(|r| (r.estimate[0] - 0.5).abs()).collect();
    d.sort_by(f64::total_cmp);
    assert!(d[2] < 0.15, "{:?}", s.reports.iter().map(|r| r.estimate[0]).collect::<Vec<_>>());
}

#[test]
fn presets_are_consistent() {
    for name in PRESET_NAMES {
        let p = preset(name).unwrap();
        assert_eq!(p.steps % p.observations, 0, "{name}");
        assert!(p.gamma < p.hurst);
        let b = Bounds::new(p.lower.clone(), p.upper.clone()).unwrap();
        assert!(b.contains(&p.theta0) && b.contains(&p.theta_true));
        p.estimator_config(0).unwrap();
    }
    assert!(preset("nope").is_err());
}
