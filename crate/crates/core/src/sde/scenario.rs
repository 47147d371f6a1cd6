use std::io::Write;

use rayon::prelude::*;

use super::brownian::{check_dimensions, simulate_brownian, BrownianBatch};
use super::grid::TimeGrid;
use super::market::{CoefficientValues, MarketModel, Scheme};
use crate::error::{invalid, Error, Result};

/// Simulated prices, bond and auxiliary state on a fixed grid.
///
/// Prices are stored `[path][point][asset]`; bond and aux `[path][point]`.
/// The discount factor is `1 / B` and is never stored separately.
#[derive(Debug, Clone)]
pub struct ScenarioSet {
    grid: TimeGrid,
    brownian: BrownianBatch,
    model: MarketModel,
    prices: Vec<f64>,
    bond: Vec<f64>,
    aux: Option<Vec<f64>>,
}

/// Mutable per-path output buffers for [`simulate_path`].
pub struct PathBuffers<'a> {
    pub prices: &'a mut [f64],
    pub bond: &'a mut [f64],
    pub aux: Option<&'a mut [f64]>,
}

/// Simulates one path given its increments (`[step][driver]`).
pub fn simulate_path(
    model: &MarketModel,
    grid: &TimeGrid,
    increments: &[f64],
    path: usize,
    out: PathBuffers<'_>,
) -> Result<()> {
    let n = model.n_assets();
    let d = model.n_drivers();
    let n_steps = grid.n_steps();
    let PathBuffers { prices, bond, mut aux } = out;

    let mut values = model.new_values();
    prices[..n].copy_from_slice(model.initial_prices());
    let mut aux_value = model.aux().map_or(0.0, |a| a.initial());
    if let Some(a) = aux.as_deref_mut() {
        a[0] = aux_value;
    }
    bond[0] = 1.0;

    let mut log_bond = 0.0;
    let mut prev_rate = 0.0;
    let mut prev_integrand = 0.0;
    let mut integral = 0.0;

    for k in 0..=n_steps {
        let t = grid.t(k);
        let current = &prices[k * n..(k + 1) * n];
        model.evaluate(t, current, aux_value, &mut values);
        if !values.is_finite() {
            return Err(Error::Simulation {
                path,
                step: k,
                reason: "non-finite coefficient".into(),
            });
        }
        let integrand = values.integrability_integrand();
        if k > 0 {
            let dt = grid.dt(k - 1);
            log_bond += 0.5 * (prev_rate + values.rate) * dt;
            bond[k] = log_bond.exp();
            integral += 0.5 * (prev_integrand + integrand) * dt;
            if !(bond[k] > 0.0 && bond[k].is_finite()) {
                return Err(Error::Simulation {
                    path,
                    step: k,
                    reason: format!("bond left (0, inf): {}", bond[k]),
                });
            }
        }
        prev_rate = values.rate;
        prev_integrand = integrand;
        if k == n_steps {
            break;
        }

        let dt = grid.dt(k);
        let dw = &increments[k * d..(k + 1) * d];
        for i in 0..n {
            let row = values.vol_row(i);
            let shock: f64 = row.iter().zip(dw).map(|(s, w)| s * w).sum();
            let next = match model.scheme() {
                Scheme::LogExactConstant | Scheme::EulerLog => {
                    let var: f64 = row.iter().map(|s| s * s).sum();
                    prices[k * n + i] * ((values.drift[i] - 0.5 * var) * dt + shock).exp()
                }
                Scheme::Euler => prices[k * n + i] * (1.0 + values.drift[i] * dt + shock),
            };
            if !(next > 0.0 && next.is_finite()) {
                return Err(Error::Simulation {
                    path,
                    step: k + 1,
                    reason: format!("price of asset {i} left (0, inf): {next}"),
                });
            }
            prices[(k + 1) * n + i] = next;
        }
        if let Some(process) = model.aux() {
            aux_value = process.step(aux_value, dt, dw);
            if !aux_value.is_finite() {
                return Err(Error::Simulation {
                    path,
                    step: k + 1,
                    reason: "non-finite aux state".into(),
                });
            }
            if let Some(a) = aux.as_deref_mut() {
                a[k + 1] = aux_value;
            }
        }
    }
    if !(integral <= model.integral_cap()) {
        return Err(Error::Simulation {
            path,
            step: n_steps,
            reason: format!("coefficient integral {integral} exceeds cap {}", model.integral_cap()),
        });
    }
    Ok(())
}

/// Simulates bond, prices and aux state for every path of `brownian`.
pub fn simulate_market(model: &MarketModel, brownian: &BrownianBatch, grid: &TimeGrid) -> Result<ScenarioSet> {
    if brownian.n_drivers() != model.n_drivers() {
        return invalid(format!(
            "brownian batch has {} drivers, model expects {}",
            brownian.n_drivers(),
            model.n_drivers()
        ));
    }
    if brownian.n_steps() != grid.n_steps() {
        return invalid("brownian batch and grid disagree on the number of steps");
    }
    let n = model.n_assets();
    let points = grid.n_points();
    let n_paths = brownian.n_paths();
    let mut prices = vec![0.0; n_paths * points * n];
    let mut bond = vec![0.0; n_paths * points];
    let mut aux = model.aux().map(|_| vec![0.0; n_paths * points]);

    let results: Vec<Result<()>> = match aux.as_mut() {
        Some(aux) => prices
            .par_chunks_mut(points * n)
            .zip(bond.par_chunks_mut(points))
            .zip(aux.par_chunks_mut(points))
            .enumerate()
            .map(|(path, ((p, b), a))| {
                let buffers = PathBuffers {
                    prices: p,
                    bond: b,
                    aux: Some(a),
                };
                simulate_path(model, grid, brownian.path(path), path, buffers)
            })
            .collect(),
        None => prices
            .par_chunks_mut(points * n)
            .zip(bond.par_chunks_mut(points))
            .enumerate()
            .map(|(path, (p, b))| {
                let buffers = PathBuffers {
                    prices: p,
                    bond: b,
                    aux: None,
                };
                simulate_path(model, grid, brownian.path(path), path, buffers)
            })
            .collect(),
    };
    results.into_iter().collect::<Result<Vec<()>>>()?;

    Ok(ScenarioSet {
        grid: grid.clone(),
        brownian: brownian.clone(),
        model: model.clone(),
        prices,
        bond,
        aux,
    })
}

/// Draws the Brownian batch and simulates the market in one call.
pub fn simulate_scenarios(model: &MarketModel, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<ScenarioSet> {
    check_dimensions(model.n_drivers(), n_paths)?;
    let brownian = simulate_brownian(grid, model.n_drivers(), n_paths, seed)?;
    simulate_market(model, &brownian, grid)
}

impl ScenarioSet {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn brownian(&self) -> &BrownianBatch {
        &self.brownian
    }

    pub fn model(&self) -> &MarketModel {
        &self.model
    }

    pub fn n_paths(&self) -> usize {
        self.brownian.n_paths()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn n_points(&self) -> usize {
        self.grid.n_points()
    }

    pub fn n_assets(&self) -> usize {
        self.model.n_assets()
    }

    pub fn n_drivers(&self) -> usize {
        self.model.n_drivers()
    }

    #[inline]
    fn point(&self, path: usize, step: usize) -> usize {
        path * self.grid.n_points() + step
    }

    /// Prices of all assets at grid point `step`.
    #[inline]
    pub fn prices(&self, path: usize, step: usize) -> &[f64] {
        let n = self.n_assets();
        let start = self.point(path, step) * n;
        &self.prices[start..start + n]
    }

    #[inline]
    pub fn price(&self, path: usize, step: usize, asset: usize) -> f64 {
        self.prices[self.point(path, step) * self.n_assets() + asset]
    }

    #[inline]
    pub fn bond(&self, path: usize, step: usize) -> f64 {
        self.bond[self.point(path, step)]
    }

    /// `gamma = 1 / B`.
    #[inline]
    pub fn discount(&self, path: usize, step: usize) -> f64 {
        1.0 / self.bond(path, step)
    }

    /// Auxiliary state, `0.0` for markets without one.
    #[inline]
    pub fn aux(&self, path: usize, step: usize) -> f64 {
        self.aux.as_ref().map_or(0.0, |a| a[self.point(path, step)])
    }

    pub fn has_aux(&self) -> bool {
        self.aux.is_some()
    }

    /// Brownian increments over `[t_step, t_{step+1})`.
    #[inline]
    pub fn increments(&self, path: usize, step: usize) -> &[f64] {
        self.brownian.step(path, step)
    }

    /// Re-evaluates the market coefficients at a stored point.
    pub fn coefficients(&self, path: usize, step: usize, out: &mut CoefficientValues) {
        let t = self.grid.t(step);
        self.model
            .evaluate(t, self.prices(path, step), self.aux(path, step), out);
    }

    /// True when the bond path is the same on every path.
    pub fn bond_is_deterministic(&self) -> bool {
        let points = self.n_points();
        let first = &self.bond[..points];
        self.bond.chunks(points).all(|b| b == first)
    }

    /// One CSV row per `(path, step)`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let n = self.n_assets();
        let d = self.n_drivers();
        let mut header = vec![
            "path".to_string(),
            "step".into(),
            "t".into(),
            "bond".into(),
            "discount".into(),
        ];
        header.extend((0..n).map(|i| format!("price_{i}")));
        if self.has_aux() {
            header.push("aux".into());
        }
        header.extend((0..d).map(|j| format!("dw_{j}")));
        w.write_record(&header)?;
        for path in 0..self.n_paths() {
            for step in 0..self.n_points() {
                let mut row = vec![
                    path.to_string(),
                    step.to_string(),
                    self.grid.t(step).to_string(),
                    self.bond(path, step).to_string(),
                    self.discount(path, step).to_string(),
                ];
                row.extend(self.prices(path, step).iter().map(|p| p.to_string()));
                if self.has_aux() {
                    row.push(self.aux(path, step).to_string());
                }
                if step < self.n_steps() {
                    row.extend(self.increments(path, step).iter().map(|x| x.to_string()));
                } else {
                    row.extend(std::iter::repeat_n(String::new(), d));
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::sde::market::{CoefficientModel, ConstantCoefficients};

    fn frozen_market() -> MarketModel {
        let c = ConstantCoefficients::new(0.0, vec![0.0, 0.0], vec![0.0, 0.0], vec![vec![0.0], vec![0.0]]).unwrap();
        MarketModel::new(Arc::new(c), vec![10.0, 20.0], Scheme::EulerLog, None).unwrap()
    }

    #[test]
    fn frozen_market_stays_put() {
        let g = TimeGrid::uniform(1.0, 8).unwrap();
        let s = simulate_scenarios(&frozen_market(), &g, 5, 1).unwrap();
        for p in 0..5 {
            for k in 0..=8 {
                assert_eq!(s.prices(p, k), &[10.0, 20.0]);
                assert_eq!(s.bond(p, k), 1.0);
            }
        }
    }

    #[test]
    fn discount_inverts_bond() {
        let m = MarketModel::black_scholes(1.0, 0.07, 0.05, 0.0, 0.2).unwrap();
        let g = TimeGrid::uniform(3.0, 40).unwrap();
        let s = simulate_scenarios(&m, &g, 4, 2).unwrap();
        for p in 0..4 {
            for k in 0..=40 {
                assert!((s.discount(p, k) * s.bond(p, k) - 1.0).abs() <= f64::EPSILON);
            }
        }
    }

    #[test]
    fn constant_rate_bond_is_exponential() {
        let m = MarketModel::black_scholes(1.0, 0.05, 0.05, 0.0, 0.2).unwrap();
        let g = TimeGrid::uniform(2.0, 64).unwrap();
        let s = simulate_scenarios(&m, &g, 3, 5).unwrap();
        for p in 0..3 {
            let b = s.bond(p, 64);
            assert!((b - (0.1f64).exp()).abs() <= 4.0 * f64::EPSILON * b);
            for k in 0..=64 {
                let prod = s.discount(p, k) * s.bond(p, k);
                assert!((prod - 1.0).abs() <= f64::EPSILON);
                assert!(s.price(p, k, 0) > 0.0);
            }
        }
        assert!(s.bond_is_deterministic());
    }

    #[test]
    fn terminal_moment_matches_lognormal() {
        // E[P(T)/p] = exp(bT); log-exact is exact in law even with one step.
        let n = 100_000;
        let m = MarketModel::black_scholes(1.0, 0.05, 0.05, 0.0, 0.2).unwrap();
        for n_steps in [1, 16] {
            let g = TimeGrid::uniform(1.0, n_steps).unwrap();
            let s = simulate_scenarios(&m, &g, n, 42).unwrap();
            let xs: Vec<f64> = (0..n).map(|p| s.price(p, n_steps, 0)).collect();
            let e = crate::stats::Estimate::from_samples(&xs);
            assert!(e.z_score(0.05f64.exp()).abs() <= 3.0, "{e:?}");
        }
    }

    #[test]
    fn euler_scheme_reports_negative_price() {
        let c = ConstantCoefficients::black_scholes(0.0, 0.0, 0.0, 5.0).unwrap();
        let m = MarketModel::new(Arc::new(c), vec![1.0], Scheme::Euler, None).unwrap();
        let g = TimeGrid::uniform(1.0, 1).unwrap();
        let err = simulate_scenarios(&m, &g, 200, 3).unwrap_err();
        assert!(matches!(err, Error::Simulation { step: 1, .. }), "{err}");
    }

    #[derive(Debug)]
    struct Exploding;

    impl CoefficientModel for Exploding {
        fn n_assets(&self) -> usize {
            1
        }
        fn n_drivers(&self) -> usize {
            1
        }
        fn evaluate(&self, t: f64, _p: &[f64], _a: f64, out: &mut CoefficientValues) {
            out.rate = 0.0;
            out.drift[0] = if t > 0.4 { f64::NAN } else { 0.0 };
            out.dividend[0] = 0.0;
            out.volatility[0] = 0.1;
        }
    }

    #[test]
    fn non_finite_coefficient_names_path_and_step() {
        let m = MarketModel::new(Arc::new(Exploding), vec![1.0], Scheme::EulerLog, None).unwrap();
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        match simulate_scenarios(&m, &g, 2, 0).unwrap_err() {
            Error::Simulation { path, step, .. } => {
                assert_eq!(path, 0);
                assert_eq!(step, 2);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        let b = simulate_brownian(&g, 2, 3, 0).unwrap();
        let m = MarketModel::black_scholes(1.0, 0.0, 0.0, 0.0, 0.2).unwrap();
        assert!(simulate_market(&m, &b, &g).is_err());
    }

    #[test]
    fn csv_has_one_row_per_point() {
        let m = MarketModel::black_scholes(1.0, 0.0, 0.0, 0.0, 0.2).unwrap();
        let g = TimeGrid::uniform(1.0, 3).unwrap();
        let s = simulate_scenarios(&m, &g, 2, 0).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 4);
        assert!(text.starts_with("path,step,t,bond,discount,price_0,dw_0"));
    }
}
