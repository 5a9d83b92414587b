//! Fractional Brownian motion on uniform grids.
//!
//! Increments are sampled exactly by circulant embedding of the fractional
//! Gaussian noise covariance
//!
//!   c_k = Δ^{2H}/2 (|k+1|^{2H} + |k-1|^{2H} - 2|k|^{2H}),
//!
//! which is also the exact value of c_H ∫∫ |u-v|^{2H-2} du dv over a pair of
//! grid cells at lag k. The same numbers therefore serve as the cell-exact
//! quadrature weights of the |H| inner product.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::stats::ls_fit;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HurstParam(f64);

impl HurstParam {
    pub fn new(h: f64) -> Result<Self> {
        if !(h > 0.5 && h < 1.0) {
            return Err(Error::Argument(format!("Hurst parameter must lie in (1/2, 1), got {h}")));
        }
        Ok(HurstParam(h))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// c_H = H(2H-1)
    pub fn c_h(self) -> f64 {
        self.0 * (2.0 * self.0 - 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Argument(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Argument("grid needs at least one step".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    /// Grid made of the first `k` steps of this one.
    pub fn prefix(&self, k: usize) -> Result<TimeGrid> {
        if k == 0 || k > self.steps {
            return Err(Error::Argument(format!("prefix length {k} outside 1..={}", self.steps)));
        }
        TimeGrid::new(self.node(k), k)
    }

    /// Index of the node closest to `t`, if it lies within a relative tolerance.
    pub fn node_index(&self, t: f64) -> Option<usize> {
        let x = t / self.dt();
        let k = x.round();
        if k < 0.0 || k > self.steps as f64 || (x - k).abs() > 1e-9 * x.abs().max(1.0) {
            None
        } else {
            Some(k as usize)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbmPath {
    pub grid: TimeGrid,
    pub hurst: HurstParam,
    pub seed: u64,
    /// d rows of M+1 node values.
    pub values: Vec<Vec<f64>>,
    /// d rows of M cell increments; `values` are their running sums.
    pub incs: Vec<Vec<f64>>,
}

impl FbmPath {
    pub fn from_increments(grid: TimeGrid, hurst: HurstParam, seed: u64, incs: &[Vec<f64>]) -> Self {
        let values = incs
            .iter()
            .map(|inc| {
                let mut v = Vec::with_capacity(inc.len() + 1);
                let mut acc = 0.0;
                v.push(0.0);
                for x in inc {
                    acc += x;
                    v.push(acc);
                }
                v
            })
            .collect();
        FbmPath { grid, hurst, seed, values, incs: incs.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Increment of channel j over cell k.
    #[inline]
    pub fn increment(&self, j: usize, k: usize) -> f64 {
        self.incs[j][k]
    }

    pub fn increments(&self, j: usize) -> &[f64] {
        &self.incs[j]
    }

    /// Path restricted to a coarser grid whose nodes are every `factor`-th node.
    pub fn subsample(&self, factor: usize) -> Result<FbmPath> {
        let m = self.grid.steps();
        if factor == 0 || m % factor != 0 {
            return Err(Error::Argument(format!("cannot subsample {m} steps by {factor}")));
        }
        let grid = TimeGrid::new(self.grid.horizon(), m / factor)?;
        let incs: Vec<Vec<f64>> = self.incs.iter().map(|v| v.chunks(factor).map(|c| c.iter().sum()).collect()).collect();
        Ok(FbmPath::from_increments(grid, self.hurst, self.seed, &incs))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for j in 0..self.dim() {
            out.push_str(&format!(",B{}", j + 1));
        }
        out.push('\n');
        for k in 0..=self.grid.steps() {
            out.push_str(&format!("{}", self.grid.node(k)));
            for v in &self.values {
                out.push_str(&format!(",{}", v[k]));
            }
            out.push('\n');
        }
        out
    }
}

/// R_H(s,t) = (s^{2H} + t^{2H} - |t-s|^{2H}) / 2
pub fn fbm_covariance(s: f64, t: f64, h: HurstParam) -> Result<f64> {
    if s < 0.0 || t < 0.0 {
        return Err(Error::Argument(format!("negative time ({s}, {t})")));
    }
    let e = 2.0 * h.value();
    Ok(0.5 * (s.powf(e) + t.powf(e) - (t - s).abs().powf(e)))
}

/// Covariance of fGn increments at integer lag `k` on cells of width `dt`.
pub fn fgn_autocov(k: usize, h: HurstParam, dt: f64) -> f64 {
    let e = 2.0 * h.value();
    let k = k as f64;
    let v = if k == 0.0 {
        1.0
    } else {
        0.5 * ((k + 1.0).powf(e) + (k - 1.0).powf(e) - 2.0 * k.powf(e))
    };
    v * dt.powf(e)
}

/// Exact sampler of the fGn increments of one grid, reusable across seeds.
#[derive(Clone)]
pub struct FbmGenerator {
    grid: TimeGrid,
    hurst: HurstParam,
    scale: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl FbmGenerator {
    pub fn new(grid: TimeGrid, hurst: HurstParam) -> Result<Self> {
        let m = grid.steps();
        let n = 2 * m;
        let dt = grid.dt();
        let mut row: Vec<Complex<f64>> = Vec::with_capacity(n);
        for k in 0..=m {
            row.push(Complex::new(fgn_autocov(k, hurst, dt), 0.0));
        }
        for k in (1..m).rev() {
            row.push(Complex::new(fgn_autocov(k, hurst, dt), 0.0));
        }
        let fft = FftPlanner::new().plan_fft_forward(n);
        fft.process(&mut row);
        let max = row.iter().map(|c| c.re).fold(0.0, f64::max);
        let tol = 1e-10 * max.max(f64::MIN_POSITIVE);
        let most_negative = row.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
        if most_negative < -tol {
            return Err(Error::Embedding(most_negative));
        }
        let scale = row.iter().map(|c| (c.re.max(0.0) / n as f64).sqrt()).collect();
        Ok(FbmGenerator { grid, hurst, scale, fft })
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn hurst(&self) -> HurstParam {
        self.hurst
    }

    /// Two independent increment sequences from one complex transform.
    pub fn sample_pair<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let m = self.grid.steps();
        let mut w: Vec<Complex<f64>> = self
            .scale
            .iter()
            .map(|s| {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                Complex::new(s * a, s * b)
            })
            .collect();
        self.fft.process(&mut w);
        (w[..m].iter().map(|c| c.re).collect(), w[..m].iter().map(|c| c.im).collect())
    }

    /// `d` independent increment sequences from the stream `seed`.
    pub fn increments(&self, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_from(seed);
        let mut out = Vec::with_capacity(d);
        while out.len() < d {
            let (a, b) = self.sample_pair(&mut rng);
            out.push(a);
            if out.len() < d {
                out.push(b);
            }
        }
        out
    }

    pub fn path(&self, d: usize, seed: u64) -> FbmPath {
        FbmPath::from_increments(self.grid, self.hurst, seed, &self.increments(d, seed))
    }
}

pub fn simulate_fbm(grid: TimeGrid, d: usize, h: HurstParam, seed: u64) -> Result<FbmPath> {
    if grid.steps() < 2 {
        return Err(Error::Argument("simulation needs M >= 2".into()));
    }
    if d == 0 {
        return Err(Error::Argument("dimension must be positive".into()));
    }
    Ok(FbmGenerator::new(grid, h)?.path(d, seed))
}

/// Toeplitz matrix of the cell covariances of the first `n` cells of a grid.
#[derive(Debug, Clone)]
pub struct CellCovariance {
    lags: Vec<f64>,
}

impl CellCovariance {
    pub fn new(grid: &TimeGrid, h: HurstParam) -> Self {
        let dt = grid.dt();
        CellCovariance { lags: (0..grid.steps()).map(|k| fgn_autocov(k, h, dt)).collect() }
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, s: usize) -> f64 {
        self.lags[r.abs_diff(s)]
    }

    pub fn lags(&self) -> &[f64] {
        &self.lags
    }

    /// C v for a vector over the first `v.len()` cells.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let n = v.len();
        let c = &self.lags;
        (0..n)
            .map(|r| {
                let mut acc = 0.0;
                for (s, vs) in v.iter().enumerate() {
                    acc += c[r.abs_diff(s)] * vs;
                }
                acc
            })
            .collect()
    }

    /// φᵀ C ψ over the first `min(len)` cells.
    pub fn quad(&self, phi: &[f64], psi: &[f64]) -> f64 {
        let cpsi = self.apply(psi);
        phi.iter().zip(&cpsi).map(|(a, b)| a * b).sum()
    }

    /// Dense n×n block (row-major).
    pub fn dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * n];
        for r in 0..n {
            for s in 0..n {
                out[r * n + s] = self.at(r, s);
            }
        }
        out
    }
}

/// Function on a grid, constant on each cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: TimeGrid,
    pub cells: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: TimeGrid, cells: Vec<f64>) -> Result<Self> {
        if cells.len() != grid.steps() {
            return Err(Error::Argument(format!(
                "grid function has {} cells, grid has {}",
                cells.len(),
                grid.steps()
            )));
        }
        Ok(GridFunction { grid, cells })
    }

    /// Cell values f(midpoint).
    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let dt = grid.dt();
        let cells = (0..grid.steps()).map(|k| f((k as f64 + 0.5) * dt)).collect();
        GridFunction { grid, cells }
    }

    /// 1_{[0,s]}, with partial cells weighted by their covered fraction.
    pub fn indicator(grid: TimeGrid, s: f64) -> Self {
        let dt = grid.dt();
        let cells = (0..grid.steps())
            .map(|k| ((s - k as f64 * dt) / dt).clamp(0.0, 1.0))
            .collect();
        GridFunction { grid, cells }
    }
}

/// c_H ∫∫ φ_r ψ_u |r-u|^{2H-2} dr du for cellwise constant φ, ψ.
pub fn weighted_inner(phi: &GridFunction, psi: &GridFunction, h: HurstParam) -> Result<f64> {
    if phi.grid != psi.grid || phi.cells.len() != psi.cells.len() {
        return Err(Error::Argument("grid functions live on different grids".into()));
    }
    Ok(CellCovariance::new(&phi.grid, h).quad(&phi.cells, &psi.cells))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RsCorrection {
    /// Plain slope of log(R/S) against log(n).
    None,
    /// 0.5 plus the slope of log(R/S) - log E[R/S] under white noise.
    AnisLloyd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RsConfig {
    pub min_window: usize,
    pub max_fraction: f64,
    pub correction: RsCorrection,
}

impl Default for RsConfig {
    fn default() -> Self {
        RsConfig { min_window: 16, max_fraction: 0.25, correction: RsCorrection::AnisLloyd }
    }
}

/// Expected R/S of white noise for window n (Anis-Lloyd with the Peters factor).
fn expected_rs(n: usize) -> f64 {
    let nf = n as f64;
    let sum: f64 = (1..n).map(|i| ((nf - i as f64) / i as f64).sqrt()).sum();
    let lead = if n <= 340 {
        use statrs::function::gamma::ln_gamma;
        (ln_gamma((nf - 1.0) / 2.0) - ln_gamma(nf / 2.0)).exp() / std::f64::consts::PI.sqrt()
    } else {
        1.0 / (nf * std::f64::consts::FRAC_PI_2).sqrt()
    };
    (nf - 0.5) / nf * lead * sum
}

fn dyadic_windows(len: usize, min_window: usize, max_fraction: f64) -> Vec<usize> {
    let max = (len as f64 * max_fraction).floor() as usize;
    let mut out = Vec::new();
    let mut n = min_window.max(2).next_power_of_two();
    while n <= max {
        out.push(n);
        n *= 2;
    }
    out
}

/// Average rescaled range over non-overlapping blocks of length n.
fn mean_rs(series: &[f64], n: usize) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for block in series.chunks_exact(n) {
        let mean = block.iter().sum::<f64>() / n as f64;
        let mut acc = 0.0;
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        let mut ss = 0.0;
        for x in block {
            let dev = x - mean;
            acc += dev;
            lo = lo.min(acc);
            hi = hi.max(acc);
            ss += dev * dev;
        }
        let s = (ss / n as f64).sqrt();
        if s > 0.0 {
            total += (hi - lo) / s;
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// R/S Hurst estimate with the default window scheme.
pub fn estimate_hurst_rs(series: &[f64]) -> Result<f64> {
    estimate_hurst_rs_with(series, &RsConfig::default())
}

/// R/S Hurst estimate over dyadic windows. If the configured range holds fewer than
/// two window sizes, windows from 8 up to half the length are used instead.
pub fn estimate_hurst_rs_with(series: &[f64], cfg: &RsConfig) -> Result<f64> {
    if series.len() < 32 {
        return Err(Error::Degenerate(format!("series of length {} is shorter than 32", series.len())));
    }
    if series.iter().any(|x| !x.is_finite()) {
        return Err(Error::Argument("series contains non-finite values".into()));
    }
    let first = series[0];
    if series.iter().all(|x| *x == first) {
        return Err(Error::Degenerate("constant series has zero range".into()));
    }
    let mut windows = dyadic_windows(series.len(), cfg.min_window, cfg.max_fraction);
    if windows.len() < 2 {
        windows = dyadic_windows(series.len(), 8, 0.5);
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for n in windows {
        if let Some(rs) = mean_rs(series, n) {
            xs.push((n as f64).ln());
            let y = match cfg.correction {
                RsCorrection::None => rs.ln(),
                RsCorrection::AnisLloyd => rs.ln() - expected_rs(n).ln(),
            };
            ys.push(y);
        }
    }
    if xs.len() < 2 {
        return Err(Error::Degenerate("fewer than two usable window sizes".into()));
    }
    let (slope, _) = ls_fit(&xs, &ys);
    Ok(match cfg.correction {
        RsCorrection::None => slope,
        RsCorrection::AnisLloyd => 0.5 + slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{covariance, mean};

    fn h(v: f64) -> HurstParam {
        HurstParam::new(v).unwrap()
    }

    #[test]
    fn covariance_examples() {
        assert!((fbm_covariance(1.0, 1.0, h(0.6)).unwrap() - 1.0).abs() < 1e-15);
        assert!((fbm_covariance(2.0, 2.0, h(0.6)).unwrap() - 2.297397).abs() < 1e-6);
        assert!((fbm_covariance(1.0, 2.0, h(0.75)).unwrap() - 1.414214).abs() < 1e-6);
        assert!(fbm_covariance(-1.0, 2.0, h(0.75)).is_err());
    }

    #[test]
    fn hurst_domain() {
        assert!(HurstParam::new(0.5).is_err());
        assert!(HurstParam::new(1.0).is_err());
        assert!(HurstParam::new(0.4).is_err());
        assert!((h(0.75).c_h() - 0.375).abs() < 1e-15);
    }

    #[test]
    fn cell_covariance_matches_double_integral() {
        // brute-force c_H ∫∫ |u-v|^{2H-2} over cells 0 and 3, midpoint rule on a fine mesh
        let hp = h(0.7);
        let dt = 0.1;
        let n = 400;
        let e = 2.0 * hp.value() - 2.0;
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                let u = (i as f64 + 0.5) * dt / n as f64;
                let v = 3.0 * dt + (j as f64 + 0.5) * dt / n as f64;
                acc += (v - u).powf(e);
            }
        }
        acc *= hp.c_h() * (dt / n as f64).powi(2);
        assert!((acc - fgn_autocov(3, hp, dt)).abs() < 1e-6 * acc);
    }

    #[test]
    fn weighted_inner_examples() {
        let g = TimeGrid::new(1.0, 512).unwrap();
        let one = GridFunction::indicator(g, 1.0);
        assert!((weighted_inner(&one, &one, h(0.6)).unwrap() - 1.0).abs() < 1e-10);
        let half = GridFunction::indicator(g, 0.5);
        let want = fbm_covariance(0.5, 1.0, h(0.6)).unwrap();
        assert!((weighted_inner(&half, &one, h(0.6)).unwrap() - want).abs() < 1e-10);
        let g = TimeGrid::new(0.7, 100).unwrap();
        let one = GridFunction::indicator(g, 0.7);
        assert!((weighted_inner(&one, &one, h(0.75)).unwrap() - 0.585662).abs() < 1e-6);
        let other = GridFunction::indicator(TimeGrid::new(1.0, 100).unwrap(), 0.5);
        assert!(weighted_inner(&one, &other, h(0.75)).is_err());
    }

    #[test]
    fn paths_start_at_zero_and_are_reproducible() {
        let g = TimeGrid::new(2.0, 64).unwrap();
        let a = simulate_fbm(g, 3, h(0.7), 11).unwrap();
        let b = simulate_fbm(g, 3, h(0.7), 11).unwrap();
        assert_eq!(a, b);
        assert!(a.values.iter().all(|v| v[0] == 0.0 && v.len() == 65));
        let c = simulate_fbm(g, 3, h(0.7), 12).unwrap();
        assert_ne!(a, c);
        assert!(simulate_fbm(TimeGrid::new(1.0, 1).unwrap(), 1, h(0.7), 0).is_err());
    }

    #[test]
    fn brownian_limit_increment_variance() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let gen = FbmGenerator::new(g, h(0.500001)).unwrap();
        let n = 100_000;
        let xs: Vec<f64> = (0..n / 2)
            .flat_map(|i| {
                let inc = gen.increments(2, i as u64);
                [inc[0][3], inc[1][3]]
            })
            .collect();
        let v = covariance(&xs, &xs);
        let want = 1.0 / 8.0;
        let se = want * (2.0 / n as f64).sqrt();
        assert!((v - want).abs() < 3.0 * se, "{v}");
    }

    #[test]
    fn covariance_of_half_and_terminal_value() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let gen = FbmGenerator::new(g, h(0.6)).unwrap();
        let n = 100_000;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for i in 0..n / 2 {
            let inc = gen.increments(2, 1000 + i as u64);
            for ch in inc {
                a.push(ch[..8].iter().sum::<f64>());
                b.push(ch.iter().sum::<f64>());
            }
        }
        let c = covariance(&a, &b);
        let want = fbm_covariance(0.5, 1.0, h(0.6)).unwrap();
        // Var of the product estimator for Gaussians: (σa²σb² + c²)/n
        let se = ((2.0f64.powf(-1.2) + want * want) / n as f64).sqrt();
        assert!((c - want).abs() < 3.0 * se, "{c} vs {want}");
        assert!(mean(&a).abs() < 3.0 * (2.0f64.powf(-1.2) / n as f64).sqrt());
    }

    #[test]
    fn rs_rejects_degenerate_input() {
        assert!(estimate_hurst_rs(&[0.0; 64]).is_err());
        assert!(estimate_hurst_rs(&[1.0; 10]).is_err());
    }

    #[test]
    fn expected_rs_branches_agree() {
        let a = expected_rs(340);
        let nf = 340.0f64;
        let sum: f64 = (1..340).map(|i| ((nf - i as f64) / i as f64).sqrt()).sum();
        let b = (nf - 0.5) / nf / (nf * std::f64::consts::FRAC_PI_2).sqrt() * sum;
        assert!((a - b).abs() / a < 1e-2);
    }
}
