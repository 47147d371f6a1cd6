//! State-price deflator: market price of risk, `Z_0`, `H_0 = gamma Z_0`.

mod projection;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use projection::{market_price_of_risk, ProjectionSlice, Projector, DEFAULT_RANK_TOL};

use crate::error::{invalid, Result};
use crate::sde::{fill_path_increments, simulate_path, MarketModel, PathBuffers, ScenarioSet, TimeGrid};
use crate::stats::{quantile, Estimate};

/// Per-path market price of risk, kernel residual and deflators.
///
/// `theta` is `[path][point][driver]`, `residual` is `[path][point][asset]`,
/// scalar fields are `[path][point]`.
#[derive(Debug, Clone)]
pub struct DeflatorSet {
    n_paths: usize,
    points: usize,
    n: usize,
    d: usize,
    theta: Vec<f64>,
    residual: Vec<f64>,
    residual_norm: Vec<f64>,
    log_z: Vec<f64>,
    h: Vec<f64>,
    theta_sq_integral: Vec<f64>,
    min_rank: usize,
}

struct PathOut<'a> {
    theta: &'a mut [f64],
    residual: &'a mut [f64],
    residual_norm: &'a mut [f64],
    log_z: &'a mut [f64],
    h: &'a mut [f64],
}

struct PathView<'a> {
    prices: &'a [f64],
    bond: &'a [f64],
    aux: Option<&'a [f64]>,
    increments: &'a [f64],
}

/// Returns `(theta_sq_integral, min_rank)`.
fn deflate_path(
    model: &MarketModel,
    grid: &TimeGrid,
    cached: Option<&Projector>,
    rank_tol: f64,
    view: PathView<'_>,
    out: PathOut<'_>,
) -> Result<(f64, usize)> {
    let n = model.n_assets();
    let d = model.n_drivers();
    let mut values = model.new_values();
    let mut excess = vec![0.0; n];
    let mut log_z = 0.0;
    let mut integral = 0.0;
    let mut prev_sq = 0.0;
    let mut min_rank = usize::MAX;
    let mut scratch: Option<Projector> = None;

    for k in 0..grid.n_points() {
        let aux = view.aux.map_or(0.0, |a| a[k]);
        model.evaluate(grid.t(k), &view.prices[k * n..(k + 1) * n], aux, &mut values);
        for (i, e) in excess.iter_mut().enumerate() {
            *e = values.excess(i);
        }
        let theta = &mut out.theta[k * d..(k + 1) * d];
        let residual = &mut out.residual[k * n..(k + 1) * n];
        let rank = match cached {
            Some(p) => {
                p.apply(&values.volatility, &excess, theta, residual);
                p.rank()
            }
            None => {
                let p = match scratch.as_mut() {
                    Some(p) => {
                        p.rebuild(&values.volatility, rank_tol)?;
                        p
                    }
                    None => scratch.insert(Projector::new(&values.volatility, n, d, rank_tol)?),
                };
                p.apply(&values.volatility, &excess, theta, residual);
                p.rank()
            }
        };
        min_rank = min_rank.min(rank);
        out.residual_norm[k] = residual.iter().map(|x| x * x).sum::<f64>().sqrt();
        let sq: f64 = theta.iter().map(|x| x * x).sum();

        out.log_z[k] = log_z;
        out.h[k] = (1.0 / view.bond[k]) * log_z.exp();
        if k > 0 {
            integral += 0.5 * (prev_sq + sq) * grid.dt(k - 1);
        }
        prev_sq = sq;
        if k < grid.n_steps() {
            let dw = &view.increments[k * d..(k + 1) * d];
            let drift: f64 = theta.iter().zip(dw).map(|(a, b)| a * b).sum();
            log_z += -drift - 0.5 * sq * grid.dt(k);
        }
    }
    Ok((integral, min_rank))
}

fn constant_projector(model: &MarketModel, rank_tol: f64) -> Result<Option<Projector>> {
    if !model.is_constant() {
        return Ok(None);
    }
    let mut values = model.new_values();
    model.evaluate(0.0, model.initial_prices(), 0.0, &mut values);
    Projector::new(&values.volatility, model.n_assets(), model.n_drivers(), rank_tol).map(Some)
}

/// Computes `theta`, `p`, `Z_0` and `H_0` on every path.
///
/// `ln Z_0` is accumulated as `-theta^T dW - |theta|^2 dt / 2` with `theta`
/// frozen at the left endpoint.
pub fn deflator_paths(scenarios: &ScenarioSet, rank_tol: f64) -> Result<DeflatorSet> {
    if !(rank_tol > 0.0) {
        return invalid("rank tolerance must be positive");
    }
    let model = scenarios.model();
    let grid = scenarios.grid();
    let (n, d) = (scenarios.n_assets(), scenarios.n_drivers());
    let points = scenarios.n_points();
    let n_paths = scenarios.n_paths();
    let cached = constant_projector(model, rank_tol)?;

    let mut theta = vec![0.0; n_paths * points * d];
    let mut residual = vec![0.0; n_paths * points * n];
    let mut residual_norm = vec![0.0; n_paths * points];
    let mut log_z = vec![0.0; n_paths * points];
    let mut h = vec![0.0; n_paths * points];

    let aux_paths: Option<Vec<Vec<f64>>> = scenarios.has_aux().then(|| {
        (0..n_paths)
            .map(|p| (0..points).map(|k| scenarios.aux(p, k)).collect())
            .collect()
    });
    let results: Vec<Result<(f64, usize)>> = theta
        .par_chunks_mut(points * d)
        .zip(residual.par_chunks_mut(points * n))
        .zip(residual_norm.par_chunks_mut(points))
        .zip(log_z.par_chunks_mut(points))
        .zip(h.par_chunks_mut(points))
        .enumerate()
        .map(|(path, ((((th, re), rn), lz), hh))| {
            let prices: Vec<f64> = (0..points).flat_map(|k| scenarios.prices(path, k).to_vec()).collect();
            let bond: Vec<f64> = (0..points).map(|k| scenarios.bond(path, k)).collect();
            let view = PathView {
                prices: &prices,
                bond: &bond,
                aux: aux_paths.as_ref().map(|a| a[path].as_slice()),
                increments: scenarios.brownian().path(path),
            };
            let out = PathOut {
                theta: th,
                residual: re,
                residual_norm: rn,
                log_z: lz,
                h: hh,
            };
            deflate_path(model, grid, cached.as_ref(), rank_tol, view, out)
        })
        .collect();
    let mut theta_sq_integral = Vec::with_capacity(n_paths);
    let mut min_rank = usize::MAX;
    for r in results {
        let (integral, rank) = r?;
        theta_sq_integral.push(integral);
        min_rank = min_rank.min(rank);
    }
    Ok(DeflatorSet {
        n_paths,
        points,
        n,
        d,
        theta,
        residual,
        residual_norm,
        log_z,
        h,
        theta_sq_integral,
        min_rank,
    })
}

/// Simulates paths one at a time and keeps only `Z_0(T)`; memory does not
/// grow with the number of steps. Path `i` matches path `i` of the stored
/// pipeline for the same seed.
pub fn simulate_terminal_deflator(
    model: &MarketModel,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    rank_tol: f64,
) -> Result<Vec<f64>> {
    let (n, d) = (model.n_assets(), model.n_drivers());
    let points = grid.n_points();
    let cached = constant_projector(model, rank_tol)?;
    struct Scratch {
        dw: Vec<f64>,
        prices: Vec<f64>,
        bond: Vec<f64>,
        aux: Vec<f64>,
        theta: Vec<f64>,
        residual: Vec<f64>,
        residual_norm: Vec<f64>,
        log_z: Vec<f64>,
        h: Vec<f64>,
    }
    let results: Vec<Result<f64>> = (0..n_paths)
        .into_par_iter()
        .map_init(
            || Scratch {
                dw: vec![0.0; grid.n_steps() * d],
                prices: vec![0.0; points * n],
                bond: vec![0.0; points],
                aux: vec![0.0; points],
                theta: vec![0.0; points * d],
                residual: vec![0.0; points * n],
                residual_norm: vec![0.0; points],
                log_z: vec![0.0; points],
                h: vec![0.0; points],
            },
            |s, path| {
                fill_path_increments(grid, d, seed, path, &mut s.dw);
                let has_aux = model.aux().is_some();
                simulate_path(
                    model,
                    grid,
                    &s.dw,
                    path,
                    PathBuffers {
                        prices: &mut s.prices,
                        bond: &mut s.bond,
                        aux: has_aux.then_some(&mut s.aux[..]),
                    },
                )?;
                let view = PathView {
                    prices: &s.prices,
                    bond: &s.bond,
                    aux: has_aux.then_some(&s.aux[..]),
                    increments: &s.dw,
                };
                let out = PathOut {
                    theta: &mut s.theta,
                    residual: &mut s.residual,
                    residual_norm: &mut s.residual_norm,
                    log_z: &mut s.log_z,
                    h: &mut s.h,
                };
                deflate_path(model, grid, cached.as_ref(), rank_tol, view, out)?;
                Ok(s.log_z[points - 1].exp())
            },
        )
        .collect();
    results.into_iter().collect()
}

impl DeflatorSet {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_points(&self) -> usize {
        self.points
    }

    pub fn n_steps(&self) -> usize {
        self.points - 1
    }

    pub fn n_drivers(&self) -> usize {
        self.d
    }

    pub fn n_assets(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, path: usize, step: usize) -> usize {
        path * self.points + step
    }

    #[inline]
    pub fn theta(&self, path: usize, step: usize) -> &[f64] {
        let start = self.idx(path, step) * self.d;
        &self.theta[start..start + self.d]
    }

    /// Kernel residual `p`, the part of the excess return outside `range(sigma)`.
    #[inline]
    pub fn residual(&self, path: usize, step: usize) -> &[f64] {
        let start = self.idx(path, step) * self.n;
        &self.residual[start..start + self.n]
    }

    #[inline]
    pub fn residual_norm(&self, path: usize, step: usize) -> f64 {
        self.residual_norm[self.idx(path, step)]
    }

    #[inline]
    pub fn log_z(&self, path: usize, step: usize) -> f64 {
        self.log_z[self.idx(path, step)]
    }

    #[inline]
    pub fn z(&self, path: usize, step: usize) -> f64 {
        self.log_z(path, step).exp()
    }

    /// State-price density `H_0 = gamma Z_0`.
    #[inline]
    pub fn h(&self, path: usize, step: usize) -> f64 {
        self.h[self.idx(path, step)]
    }

    pub fn h_path(&self, path: usize) -> &[f64] {
        &self.h[path * self.points..(path + 1) * self.points]
    }

    /// Trapezoidal `int_0^T |theta|^2 dt` per path.
    pub fn theta_sq_integral(&self) -> &[f64] {
        &self.theta_sq_integral
    }

    /// Smallest numerical rank of `sigma` seen on any path.
    pub fn min_rank(&self) -> usize {
        self.min_rank
    }

    pub fn max_residual_norm(&self) -> f64 {
        self.residual_norm.iter().cloned().fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["path".to_string(), "step".into()];
        header.extend((0..self.d).map(|j| format!("theta_{j}")));
        header.extend(["p_norm".into(), "z".into(), "h".into()]);
        w.write_record(&header)?;
        for path in 0..self.n_paths {
            for step in 0..self.points {
                let mut row = vec![path.to_string(), step.to_string()];
                row.extend(self.theta(path, step).iter().map(|x| x.to_string()));
                row.push(self.residual_norm(path, step).to_string());
                row.push(self.z(path, step).to_string());
                row.push(self.h(path, step).to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Summary of the pathwise `int |theta|^2 dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityReport {
    pub max: f64,
    pub mean: f64,
    /// `(level, value)` pairs.
    pub quantiles: Vec<(f64, f64)>,
    pub cap: f64,
    pub n_flagged: usize,
    /// First flagged paths, at most 100.
    pub flagged_paths: Vec<usize>,
    pub all_finite: bool,
}

pub fn integrability_diagnostic(deflators: &DeflatorSet, cap: f64) -> IntegrabilityReport {
    let xs = deflators.theta_sq_integral();
    let max = xs.iter().cloned().fold(0.0, f64::max);
    let mean = if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    };
    let flagged: Vec<usize> = xs
        .iter()
        .enumerate()
        .filter(|(_, &x)| !(x <= cap))
        .map(|(i, _)| i)
        .collect();
    IntegrabilityReport {
        max,
        mean,
        quantiles: [0.5, 0.9, 0.99].iter().map(|&q| (q, quantile(xs, q))).collect(),
        cap,
        n_flagged: flagged.len(),
        flagged_paths: flagged.into_iter().take(100).collect(),
        all_finite: xs.iter().all(|x| x.is_finite()),
    }
}

/// Sample mean of `Z_0(T)`; below one when `Z_0` is a strict local martingale.
pub fn estimate_ez0(deflators: &DeflatorSet) -> Result<Estimate> {
    if deflators.n_paths() < 2 {
        return invalid("need at least two paths to estimate E Z_0(T)");
    }
    let last = deflators.n_steps();
    let samples: Vec<f64> = (0..deflators.n_paths()).map(|p| deflators.z(p, last)).collect();
    Ok(Estimate::from_samples(&samples))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::sde::{simulate_scenarios, ConstantCoefficients, Scheme};

    #[test]
    fn zero_risk_premium_gives_unit_z() {
        let m = MarketModel::black_scholes(100.0, 0.04, 0.04, 0.0, 0.3).unwrap();
        let g = TimeGrid::uniform(1.0, 10).unwrap();
        let s = simulate_scenarios(&m, &g, 20, 3).unwrap();
        let f = deflator_paths(&s, DEFAULT_RANK_TOL).unwrap();
        for p in 0..20 {
            for k in 0..=10 {
                assert_eq!(f.z(p, k), 1.0);
                assert_eq!(f.h(p, k), s.discount(p, k));
            }
        }
        let e = estimate_ez0(&f).unwrap();
        assert_eq!(e.estimate, 1.0);
        assert_eq!(e.std_error, 0.0);
        assert_eq!(integrability_diagnostic(&f, 1.0).max, 0.0);
    }

    #[test]
    fn constant_theta_integral_is_exact() {
        // r = 0, b = 0.1, sigma = 0.2 -> theta = 0.5, integral 0.25 on [0, 1]
        let m = MarketModel::black_scholes(1.0, 0.0, 0.1, 0.0, 0.2).unwrap();
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let s = simulate_scenarios(&m, &g, 10, 1).unwrap();
        let f = deflator_paths(&s, DEFAULT_RANK_TOL).unwrap();
        for &x in f.theta_sq_integral() {
            assert!((x - 0.25).abs() < 1e-15);
        }
        let report = integrability_diagnostic(&f, 0.2);
        assert_eq!(report.n_flagged, 10);
        assert!((report.max - 0.25).abs() < 1e-15);
    }

    #[test]
    fn h_is_discount_times_z_and_positive() {
        let c = ConstantCoefficients::new(
            0.03,
            vec![0.05, 0.09],
            vec![0.0, 0.01],
            vec![vec![0.2, 0.05], vec![0.1, 0.3]],
        )
        .unwrap();
        let m = MarketModel::new(Arc::new(c), vec![1.0, 2.0], Scheme::LogExactConstant, None).unwrap();
        let g = TimeGrid::uniform(1.0, 12).unwrap();
        let s = simulate_scenarios(&m, &g, 30, 9).unwrap();
        let f = deflator_paths(&s, DEFAULT_RANK_TOL).unwrap();
        for p in 0..30 {
            assert_eq!(f.z(p, 0), 1.0);
            for k in 0..=12 {
                assert!(f.z(p, k) > 0.0);
                assert_eq!(f.h(p, k), s.discount(p, k) * f.z(p, k));
            }
        }
        assert_eq!(f.min_rank(), 2);
    }

    #[test]
    fn streaming_matches_stored_pipeline() {
        let m = MarketModel::bessel_demo(1.0, 1.0, 0.0).unwrap();
        let g = TimeGrid::uniform(1.0, 64).unwrap();
        let s = simulate_scenarios(&m, &g, 25, 4).unwrap();
        let f = deflator_paths(&s, DEFAULT_RANK_TOL).unwrap();
        let z = simulate_terminal_deflator(&m, &g, 25, 4, DEFAULT_RANK_TOL).unwrap();
        for p in 0..25 {
            assert_eq!(z[p], f.z(p, 64));
        }
    }

    #[test]
    fn too_few_paths_for_ez0() {
        let m = MarketModel::black_scholes(1.0, 0.0, 0.1, 0.0, 0.2).unwrap();
        let g = TimeGrid::uniform(1.0, 2).unwrap();
        let s = simulate_scenarios(&m, &g, 1, 1).unwrap();
        let f = deflator_paths(&s, DEFAULT_RANK_TOL).unwrap();
        assert!(estimate_ez0(&f).is_err());
    }
}
