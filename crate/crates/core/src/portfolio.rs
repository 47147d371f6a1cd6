//! Wealth and gain accounting, the deflated-wealth identity residual and the
//! tameness monitor.
//!
//! Every stochastic integral uses the left endpoint of its grid step: the
//! position held over `[t_k, t_{k+1})` is the one stored at step `k`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deflator::DeflatorSet;
use crate::error::{invalid, Error, Result};
use crate::sde::ScenarioSet;

/// Dollar amounts held in each stock, `[path][point][asset]`.
///
/// The bond amount is implied by self-financing: `pi_0 = X - sum_i pi_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioProcess {
    n_paths: usize,
    points: usize,
    n: usize,
    amounts: Vec<f64>,
}

impl PortfolioProcess {
    pub fn zeros(n_paths: usize, points: usize, n: usize) -> Self {
        Self {
            n_paths,
            points,
            n,
            amounts: vec![0.0; n_paths * points * n],
        }
    }

    pub fn from_amounts(n_paths: usize, points: usize, n: usize, amounts: Vec<f64>) -> Result<Self> {
        if amounts.len() != n_paths * points * n {
            return invalid(format!(
                "portfolio holds {} amounts, expected {}",
                amounts.len(),
                n_paths * points * n
            ));
        }
        if let Some(i) = amounts.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "portfolio amount",
                path: i / (points * n),
            });
        }
        Ok(Self {
            n_paths,
            points,
            n,
            amounts,
        })
    }

    /// Holds a fixed number of shares of every asset; the dollar amount is
    /// `shares_i * P_i(t)`.
    pub fn buy_and_hold(scenarios: &ScenarioSet, shares: &[f64]) -> Result<Self> {
        let n = scenarios.n_assets();
        if shares.len() != n {
            return invalid(format!("{} share counts for {n} assets", shares.len()));
        }
        let points = scenarios.n_points();
        let mut amounts = Vec::with_capacity(scenarios.n_paths() * points * n);
        for path in 0..scenarios.n_paths() {
            for k in 0..points {
                amounts.extend(scenarios.prices(path, k).iter().zip(shares).map(|(p, s)| p * s));
            }
        }
        Self::from_amounts(scenarios.n_paths(), points, n, amounts)
    }

    /// Builds a portfolio from a function of `(path, step, asset)`.
    pub fn from_fn(n_paths: usize, points: usize, n: usize, f: impl Fn(usize, usize, usize) -> f64) -> Result<Self> {
        let mut amounts = Vec::with_capacity(n_paths * points * n);
        for path in 0..n_paths {
            for k in 0..points {
                for i in 0..n {
                    amounts.push(f(path, k, i));
                }
            }
        }
        Self::from_amounts(n_paths, points, n, amounts)
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_points(&self) -> usize {
        self.points
    }

    pub fn n_assets(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn amounts(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * self.points + step) * self.n;
        &self.amounts[start..start + self.n]
    }

    pub(crate) fn amounts_mut(&mut self, path: usize, step: usize) -> &mut [f64] {
        let start = (path * self.points + step) * self.n;
        &mut self.amounts[start..start + self.n]
    }

    pub fn is_zero(&self) -> bool {
        self.amounts.iter().all(|&x| x == 0.0)
    }

    fn check(&self, scenarios: &ScenarioSet) -> Result<()> {
        if self.n_paths != scenarios.n_paths() || self.points != scenarios.n_points() || self.n != scenarios.n_assets()
        {
            return invalid(format!(
                "portfolio shape ({}, {}, {}) does not match scenarios ({}, {}, {})",
                self.n_paths,
                self.points,
                self.n,
                scenarios.n_paths(),
                scenarios.n_points(),
                scenarios.n_assets()
            ));
        }
        Ok(())
    }
}

/// Lump payment at a per-path grid index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lump {
    /// Grid index in `1..=N` per path; the payment lands at the close of the
    /// step ending there.
    pub index: Vec<usize>,
    pub amount: Vec<f64>,
}

/// Cumulative income `Gamma`: a payment rate plus lumps. Consumption is
/// negative income.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IncomeStream {
    /// `[path][point]`; empty means no rate.
    rate: Vec<f64>,
    lumps: Vec<Lump>,
}

impl IncomeStream {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_rate(n_paths: usize, points: usize, rate: Vec<f64>) -> Result<Self> {
        if rate.len() != n_paths * points {
            return invalid(format!(
                "income rate has {} entries, expected {}",
                rate.len(),
                n_paths * points
            ));
        }
        if let Some(i) = rate.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "income rate",
                path: i / points,
            });
        }
        Ok(Self {
            rate,
            lumps: Vec::new(),
        })
    }

    pub fn constant_rate(n_paths: usize, points: usize, c: f64) -> Result<Self> {
        Self::with_rate(n_paths, points, vec![c; n_paths * points])
    }

    pub fn add_lump(&mut self, lump: Lump) {
        self.lumps.push(lump);
    }

    pub fn lumps(&self) -> &[Lump] {
        &self.lumps
    }

    /// Income rate at a point, `0.0` when there is no rate.
    #[inline]
    pub fn rate(&self, path: usize, step: usize, points: usize) -> f64 {
        if self.rate.is_empty() {
            0.0
        } else {
            self.rate[path * points + step]
        }
    }

    /// Negated stream, turning income into consumption.
    pub fn negated(&self) -> Self {
        Self {
            rate: self.rate.iter().map(|x| -x).collect(),
            lumps: self
                .lumps
                .iter()
                .map(|l| Lump {
                    index: l.index.clone(),
                    amount: l.amount.iter().map(|x| -x).collect(),
                })
                .collect(),
        }
    }

    fn check(&self, n_paths: usize, points: usize) -> Result<()> {
        if !self.rate.is_empty() && self.rate.len() != n_paths * points {
            return invalid("income rate shape does not match scenarios");
        }
        for lump in &self.lumps {
            if lump.index.len() != n_paths || lump.amount.len() != n_paths {
                return invalid("lump vectors must have one entry per path");
            }
            if let Some(&i) = lump.index.iter().find(|&&i| i == 0 || i >= points) {
                return invalid(format!("lump index {i} outside 1..={}", points - 1));
            }
            if let Some(p) = lump.amount.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: "lump amount",
                    path: p,
                });
            }
        }
        Ok(())
    }

    /// Lump amount landing at `step` on `path`.
    fn lump_at(&self, path: usize, step: usize) -> f64 {
        self.lumps
            .iter()
            .filter(|l| l.index[path] == step)
            .map(|l| l.amount[path])
            .sum()
    }
}

/// Wealth paths `X[path][point]` and the implied bond amount.
#[derive(Debug, Clone, PartialEq)]
pub struct WealthPaths {
    n_paths: usize,
    points: usize,
    initial: f64,
    wealth: Vec<f64>,
    /// `gamma X`.
    discounted: Vec<f64>,
    bond_amount: Vec<f64>,
}

impl WealthPaths {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_points(&self) -> usize {
        self.points
    }

    pub fn initial(&self) -> f64 {
        self.initial
    }

    #[inline]
    pub fn wealth(&self, path: usize, step: usize) -> f64 {
        self.wealth[path * self.points + step]
    }

    pub fn wealth_path(&self, path: usize) -> &[f64] {
        &self.wealth[path * self.points..(path + 1) * self.points]
    }

    #[inline]
    pub fn discounted(&self, path: usize, step: usize) -> f64 {
        self.discounted[path * self.points + step]
    }

    /// `pi_0 = X - sum_i pi_i`.
    #[inline]
    pub fn bond_amount(&self, path: usize, step: usize) -> f64 {
        self.bond_amount[path * self.points + step]
    }

    /// `H_0 X` at every point, path-major.
    pub fn deflated(&self, deflators: &DeflatorSet) -> Vec<f64> {
        (0..self.n_paths)
            .flat_map(|p| (0..self.points).map(move |k| (p, k)))
            .map(|(p, k)| deflators.h(p, k) * self.wealth(p, k))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["path", "step", "wealth", "bond_amount"])?;
        for p in 0..self.n_paths {
            for k in 0..self.points {
                w.write_record(&[
                    p.to_string(),
                    k.to_string(),
                    self.wealth(p, k).to_string(),
                    self.bond_amount(p, k).to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Accumulates `gamma X` along one path and returns it per point.
fn discounted_wealth_path(
    x0: f64,
    portfolio: &PortfolioProcess,
    income: &IncomeStream,
    scenarios: &ScenarioSet,
    path: usize,
) -> Vec<f64> {
    let grid = scenarios.grid();
    let points = scenarios.n_points();
    let n = scenarios.n_assets();
    let mut values = scenarios.model().new_values();
    let mut shock = vec![0.0; n];
    let mut out = Vec::with_capacity(points);
    let mut gx = x0;
    out.push(gx);
    for k in 0..points - 1 {
        let dt = grid.dt(k);
        let gamma = scenarios.discount(path, k);
        scenarios.coefficients(path, k, &mut values);
        let dw = scenarios.increments(path, k);
        for (i, s) in shock.iter_mut().enumerate() {
            let diffusion: f64 = values.vol_row(i).iter().zip(dw).map(|(a, b)| a * b).sum();
            *s = diffusion + values.excess(i) * dt;
        }
        let pi = portfolio.amounts(path, k);
        let trade: f64 = pi.iter().zip(&shock).map(|(a, b)| a * b).sum();
        gx += gamma * trade;
        gx += gamma * income.rate(path, k, points) * dt;
        let lump = income.lump_at(path, k + 1);
        if lump != 0.0 {
            gx += scenarios.discount(path, k + 1) * lump;
        }
        out.push(gx);
    }
    out
}

/// Wealth of a self-financed portfolio with income:
/// `gamma X = x + int gamma dGamma + int gamma pi^T (sigma dW + (b + delta - r 1) dt)`.
pub fn wealth_paths(
    x0: f64,
    portfolio: &PortfolioProcess,
    income: &IncomeStream,
    scenarios: &ScenarioSet,
) -> Result<WealthPaths> {
    if !x0.is_finite() {
        return invalid("initial capital must be finite");
    }
    portfolio.check(scenarios)?;
    let points = scenarios.n_points();
    let n_paths = scenarios.n_paths();
    income.check(n_paths, points)?;

    let per_path: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|p| discounted_wealth_path(x0, portfolio, income, scenarios, p))
        .collect();
    let mut wealth = Vec::with_capacity(n_paths * points);
    let mut discounted = Vec::with_capacity(n_paths * points);
    let mut bond_amount = Vec::with_capacity(n_paths * points);
    for (p, gx) in per_path.into_iter().enumerate() {
        for (k, g) in gx.into_iter().enumerate() {
            let x = scenarios.bond(p, k) * g;
            if !x.is_finite() {
                return Err(Error::NonFinite {
                    what: "wealth",
                    path: p,
                });
            }
            wealth.push(x);
            discounted.push(g);
            bond_amount.push(x - portfolio.amounts(p, k).iter().sum::<f64>());
        }
    }
    Ok(WealthPaths {
        n_paths,
        points,
        initial: x0,
        wealth,
        discounted,
        bond_amount,
    })
}

/// Per-path residual of the deflated-wealth identity
/// `H_0 X - int H_0 dGamma = x + int H_0 (sigma^T pi - X theta)^T dW`,
/// with every integral taken at left endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityResidual {
    /// Residual at the horizon per path.
    pub terminal: Vec<f64>,
    /// Largest absolute residual over all points per path.
    pub max_abs: Vec<f64>,
    /// Largest `|H_0 X|` seen, used to scale tolerances.
    pub scale: f64,
    /// Accumulated `int H_0 pi^T p dt` per path, the drift the identity picks
    /// up when the market admits state arbitrage.
    pub arbitrage_drift: Vec<f64>,
}

impl IdentityResidual {
    pub fn max_abs_residual(&self) -> f64 {
        self.max_abs.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn deflated_wealth_identity_residual(
    wealth: &WealthPaths,
    income: &IncomeStream,
    deflators: &DeflatorSet,
    portfolio: &PortfolioProcess,
    scenarios: &ScenarioSet,
) -> Result<IdentityResidual> {
    portfolio.check(scenarios)?;
    let points = scenarios.n_points();
    let n_paths = scenarios.n_paths();
    income.check(n_paths, points)?;
    if wealth.n_paths != n_paths || wealth.points != points || deflators.n_paths() != n_paths {
        return invalid("wealth, deflators and scenarios disagree in shape");
    }
    if deflators.max_residual_norm() > 0.0 {
        log::warn!(
            "market has a nonzero kernel residual (max {:e}); the deflated-wealth identity carries a drift",
            deflators.max_residual_norm()
        );
    }
    let grid = scenarios.grid();
    let n = scenarios.n_assets();
    let d = scenarios.n_drivers();
    let x0 = wealth.initial;

    let rows: Vec<(f64, f64, f64, f64)> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut values = scenarios.model().new_values();
            let mut st_pi = vec![0.0; d];
            let mut income_integral = 0.0;
            let mut stochastic = 0.0;
            let mut drift = 0.0;
            let mut max_abs: f64 = 0.0;
            let mut scale: f64 = x0.abs();
            let mut terminal = 0.0;
            for k in 0..points {
                let hx = deflators.h(p, k) * wealth.wealth(p, k);
                scale = scale.max(hx.abs());
                let residual = hx - income_integral - x0 - stochastic;
                max_abs = max_abs.max(residual.abs());
                terminal = residual;
                if k + 1 == points {
                    break;
                }
                let h = deflators.h(p, k);
                let dt = grid.dt(k);
                scenarios.coefficients(p, k, &mut values);
                let pi = portfolio.amounts(p, k);
                values.vol_transpose_times(pi, &mut st_pi);
                let theta = deflators.theta(p, k);
                let x = wealth.wealth(p, k);
                let dw = scenarios.increments(p, k);
                stochastic += h * (0..d).map(|j| (st_pi[j] - x * theta[j]) * dw[j]).sum::<f64>();
                income_integral += h * income.rate(p, k, points) * dt;
                let lump = income.lump_at(p, k + 1);
                if lump != 0.0 {
                    income_integral += deflators.h(p, k + 1) * lump;
                }
                let residual_p = deflators.residual(p, k);
                drift += h * (0..n).map(|i| pi[i] * residual_p[i]).sum::<f64>() * dt;
            }
            (terminal, max_abs, scale, drift)
        })
        .collect();
    Ok(IdentityResidual {
        terminal: rows.iter().map(|r| r.0).collect(),
        max_abs: rows.iter().map(|r| r.1).collect(),
        scale: rows.iter().map(|r| r.2).fold(0.0, f64::max),
        arbitrage_drift: rows.iter().map(|r| r.3).collect(),
    })
}

/// Lower-bound check on a deflated value process such as `H_0 G` or `H_0 X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TamenessReport {
    pub min: f64,
    pub argmin: (usize, usize),
    pub bound: f64,
    pub violated: bool,
}

/// `values` is path-major with `points` entries per path.
pub fn tameness_monitor(values: &[f64], points: usize, bound: f64) -> TamenessReport {
    let mut min = f64::INFINITY;
    let mut argmin = (0, 0);
    for (i, &v) in values.iter().enumerate() {
        if v < min || v.is_nan() {
            min = v;
            argmin = (i / points.max(1), i % points.max(1));
            if v.is_nan() {
                break;
            }
        }
    }
    TamenessReport {
        min,
        argmin,
        bound,
        violated: !(min >= bound),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::deflator::{deflator_paths, DEFAULT_RANK_TOL};
    use crate::sde::{simulate_scenarios, ConstantCoefficients, MarketModel, Scheme, TimeGrid};

    fn scen(model: &MarketModel, steps: usize, paths: usize, seed: u64) -> ScenarioSet {
        let g = TimeGrid::uniform(1.0, steps).unwrap();
        simulate_scenarios(model, &g, paths, seed).unwrap()
    }

    #[test]
    fn all_in_bond_tracks_bond() {
        let m = MarketModel::black_scholes(100.0, 0.05, 0.08, 0.0, 0.2).unwrap();
        let s = scen(&m, 16, 4, 1);
        let pf = PortfolioProcess::zeros(4, 17, 1);
        let w = wealth_paths(1.0, &pf, &IncomeStream::none(), &s).unwrap();
        for p in 0..4 {
            for k in 0..=16 {
                assert_eq!(w.wealth(p, k), s.bond(p, k));
                assert_eq!(w.bond_amount(p, k), w.wealth(p, k));
            }
        }
    }

    #[test]
    fn pure_income_accumulates_time() {
        let m = MarketModel::black_scholes(100.0, 0.0, 0.08, 0.0, 0.2).unwrap();
        let s = scen(&m, 10, 3, 2);
        let pf = PortfolioProcess::zeros(3, 11, 1);
        let inc = IncomeStream::constant_rate(3, 11, 1.0).unwrap();
        let w = wealth_paths(2.0, &pf, &inc, &s).unwrap();
        for k in 0..=10 {
            assert!((w.wealth(1, k) - (2.0 + s.grid().t(k))).abs() < 1e-14);
        }
    }

    #[test]
    fn lump_lands_at_close_of_step() {
        let m = MarketModel::black_scholes(100.0, 0.0, 0.0, 0.0, 0.2).unwrap();
        let s = scen(&m, 4, 2, 2);
        let pf = PortfolioProcess::zeros(2, 5, 1);
        let mut inc = IncomeStream::none();
        inc.add_lump(Lump {
            index: vec![2, 4],
            amount: vec![3.0, -1.0],
        });
        let w = wealth_paths(0.0, &pf, &inc, &s).unwrap();
        assert_eq!(w.wealth_path(0), &[0.0, 0.0, 3.0, 3.0, 3.0]);
        assert_eq!(w.wealth_path(1), &[0.0, 0.0, 0.0, 0.0, -1.0]);

        let mut bad = IncomeStream::none();
        bad.add_lump(Lump {
            index: vec![0, 1],
            amount: vec![1.0, 1.0],
        });
        assert!(wealth_paths(0.0, &pf, &bad, &s).is_err());
    }

    #[test]
    fn buy_and_hold_telescopes_under_euler() {
        let c = ConstantCoefficients::black_scholes(0.0, 0.07, 0.0, 0.25).unwrap();
        let m = MarketModel::new(Arc::new(c), vec![50.0], Scheme::Euler, None).unwrap();
        let s = scen(&m, 50, 20, 5);
        let pf = PortfolioProcess::buy_and_hold(&s, &[1.0]).unwrap();
        let w = wealth_paths(50.0, &pf, &IncomeStream::none(), &s).unwrap();
        for p in 0..20 {
            for k in 0..=50 {
                let price = s.price(p, k, 0);
                assert!(
                    (w.wealth(p, k) - price).abs() <= 1e-12 * price,
                    "{} vs {}",
                    w.wealth(p, k),
                    price
                );
            }
        }
    }

    #[test]
    fn identity_is_exact_without_trading_or_risk_premium() {
        let m = MarketModel::black_scholes(100.0, 0.03, 0.03, 0.0, 0.2).unwrap();
        let s = scen(&m, 12, 6, 3);
        let f = deflator_paths(&s, DEFAULT_RANK_TOL).unwrap();
        let pf = PortfolioProcess::zeros(6, 13, 1);
        let inc = IncomeStream::none();
        let w = wealth_paths(1.5, &pf, &inc, &s).unwrap();
        let r = deflated_wealth_identity_residual(&w, &inc, &f, &pf, &s).unwrap();
        assert!(r.max_abs_residual() <= 4.0 * f64::EPSILON * r.scale);
    }

    #[test]
    fn identity_residual_shrinks_with_grid() {
        // residual of a hedged position in a market with a risk premium is a
        // discretization error of order sqrt(dt)
        let m = MarketModel::black_scholes(100.0, 0.05, 0.13, 0.0, 0.2).unwrap();
        let rms = |steps: usize| {
            let s = scen(&m, steps, 400, 8);
            let f = deflator_paths(&s, DEFAULT_RANK_TOL).unwrap();
            let pf = PortfolioProcess::buy_and_hold(&s, &[1.0]).unwrap();
            let inc = IncomeStream::none();
            let w = wealth_paths(100.0, &pf, &inc, &s).unwrap();
            let r = deflated_wealth_identity_residual(&w, &inc, &f, &pf, &s).unwrap();
            (r.terminal.iter().map(|x| x * x).sum::<f64>() / 400.0).sqrt()
        };
        let coarse = rms(16);
        let fine = rms(256);
        assert!(fine < 0.5 * coarse, "coarse {coarse}, fine {fine}");
    }

    #[test]
    fn tameness_monitor_finds_minimum() {
        let r = tameness_monitor(&[1.0, 2.0, -0.5, 3.0, 0.0, 4.0], 3, 0.0);
        assert_eq!(r.min, -0.5);
        assert_eq!(r.argmin, (0, 2));
        assert!(r.violated);
        let r = tameness_monitor(&[1.0, 2.0], 2, -1.0);
        assert!(!r.violated);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = MarketModel::black_scholes(100.0, 0.0, 0.0, 0.0, 0.2).unwrap();
        let s = scen(&m, 4, 2, 2);
        let pf = PortfolioProcess::zeros(3, 5, 1);
        assert!(wealth_paths(0.0, &pf, &IncomeStream::none(), &s).is_err());
    }
}
