//! European claims: value `E int H_0 dY`, hedge wealth, replication portfolio
//! and the rank condition for attainability.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::claims::{validate_support, ClaimSpec, StatePoint};
use crate::deflator::{integrability_diagnostic, DeflatorSet, Projector};
use crate::error::{invalid, Result};
use crate::portfolio::{wealth_paths, IncomeStream, Lump, PortfolioProcess};
use crate::regression::fit_polynomial;
use crate::sde::{CoefficientValues, ScenarioSet};
use crate::stats::Estimate;

pub const DEFAULT_DEGREE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValuationReport {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub conf_interval: (f64, f64),
    /// Largest pathwise `int |theta|^2 dt`.
    pub integrability_max: f64,
    /// Sample mean of the squared deflated cash flow, the finite-sample
    /// stand-in for the second-moment condition on the claim.
    pub second_moment: f64,
    /// Minimum over paths and steps of the accumulated deflated cash flow.
    pub tameness_min: f64,
}

impl ValuationReport {
    pub(crate) fn from_samples(samples: &[f64], deflators: &DeflatorSet, tameness_min: f64) -> Self {
        let e = Estimate::from_samples(samples);
        Self {
            estimate: e.estimate,
            std_error: e.std_error,
            n_paths: e.n,
            conf_interval: e.conf_interval,
            integrability_max: integrability_diagnostic(deflators, f64::INFINITY).max,
            second_moment: samples.iter().map(|x| x * x).sum::<f64>() / samples.len().max(1) as f64,
            tameness_min,
        }
    }
}

/// Deflated cash flows on one path, indexed by grid point: `H_k c_k dt_k`
/// before expiry and `H_tau g` at expiry.
fn path_flows(
    claim: &ClaimSpec,
    scenarios: &ScenarioSet,
    deflators: &DeflatorSet,
    path: usize,
) -> Result<(usize, Vec<f64>)> {
    let grid = scenarios.grid();
    let tau = claim.expiry.index(scenarios, path);
    let mut flows = vec![0.0; scenarios.n_points()];
    if !claim.rate.is_zero() {
        for k in 0..tau {
            let s = StatePoint::at(scenarios, path, k);
            flows[k] = deflators.h(path, k) * claim.rate_checked(&s, path)? * grid.dt(k);
        }
    }
    let s = StatePoint::at(scenarios, path, tau);
    flows[tau] = deflators.h(path, tau) * claim.payoff_checked(&s, path)?;
    Ok((tau, flows))
}

fn check_shapes(claim: &ClaimSpec, scenarios: &ScenarioSet, deflators: &DeflatorSet) -> Result<()> {
    claim.validate(scenarios.n_assets(), scenarios.n_drivers())?;
    if deflators.n_paths() != scenarios.n_paths() || deflators.n_points() != scenarios.n_points() {
        return invalid("deflators and scenarios disagree in shape");
    }
    Ok(())
}

/// Total deflated cash flow `int_0^tau H_0 dY` per path.
pub fn deflated_cash_flows(claim: &ClaimSpec, scenarios: &ScenarioSet, deflators: &DeflatorSet) -> Result<Vec<f64>> {
    check_shapes(claim, scenarios, deflators)?;
    let per_path: Vec<Result<f64>> = (0..scenarios.n_paths())
        .into_par_iter()
        .map(|p| path_flows(claim, scenarios, deflators, p).map(|(_, f)| f.iter().sum()))
        .collect();
    per_path.into_iter().collect()
}

/// Monte Carlo value `u_e = E int H_0 dY`.
pub fn price_secc(claim: &ClaimSpec, scenarios: &ScenarioSet, deflators: &DeflatorSet) -> Result<ValuationReport> {
    check_shapes(claim, scenarios, deflators)?;
    let per_path: Vec<Result<(f64, f64)>> = (0..scenarios.n_paths())
        .into_par_iter()
        .map(|p| {
            let (_, flows) = path_flows(claim, scenarios, deflators, p)?;
            let mut acc = 0.0;
            let mut min = f64::INFINITY;
            for f in &flows {
                acc += f;
                min = min.min(acc);
            }
            Ok((acc, min))
        })
        .collect();
    let mut samples = Vec::with_capacity(per_path.len());
    let mut tameness_min = f64::INFINITY;
    for r in per_path {
        let (v, m) = r?;
        samples.push(v);
        tameness_min = tameness_min.min(m);
    }
    Ok(ValuationReport::from_samples(&samples, deflators, tameness_min))
}

/// Hedge wealth `X` and martingale integrand `phi`, plus the replication
/// portfolio once [`replication_portfolio`] has run.
#[derive(Debug, Clone, PartialEq)]
pub struct HedgeResult {
    n_paths: usize,
    points: usize,
    d: usize,
    support: Vec<usize>,
    expiry: Vec<usize>,
    wealth: Vec<f64>,
    phi: Vec<f64>,
    payoff: Vec<f64>,
    rate: Vec<f64>,
    /// Basis degree used at each step after fallback.
    pub degrees: Vec<usize>,
}

impl HedgeResult {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_points(&self) -> usize {
        self.points
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Expiry grid index per path.
    pub fn expiry(&self, path: usize) -> usize {
        self.expiry[path]
    }

    /// `X(t_k)` before any payment due at `t_k`; zero after expiry.
    #[inline]
    pub fn wealth(&self, path: usize, step: usize) -> f64 {
        self.wealth[path * self.points + step]
    }

    /// `phi` over `[t_k, t_{k+1})`; zero outside the driver support.
    #[inline]
    pub fn phi(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * self.points + step) * self.d;
        &self.phi[start..start + self.d]
    }

    /// Payoff due at expiry per path.
    pub fn payoff(&self, path: usize) -> f64 {
        self.payoff[path]
    }

    /// Initial hedge wealth, the regression estimate of the claim value.
    pub fn initial_wealth(&self) -> f64 {
        self.wealth(0, 0)
    }
}

/// Row-major state `(prices, aux)` of the listed paths at one step.
pub fn state_rows(scenarios: &ScenarioSet, paths: &[usize], step: usize) -> (Vec<f64>, usize) {
    let n = scenarios.n_assets();
    let width = n + usize::from(scenarios.has_aux());
    let mut rows = Vec::with_capacity(paths.len() * width);
    for &p in paths {
        rows.extend_from_slice(scenarios.prices(p, step));
        if scenarios.has_aux() {
            rows.push(scenarios.aux(p, step));
        }
    }
    (rows, width)
}

/// Backward regression sweep for `X(t_k) = E[int_{t_k} H_0 dY | F_k] / H_0(t_k)`
/// and `phi_i(t_k) ~ E[dM dW_i | F_k] / dt` where `M` is the deflated gain
/// `H_0 X + int H_0 dY`.
pub fn hedge_wealth_surface(
    claim: &ClaimSpec,
    scenarios: &ScenarioSet,
    deflators: &DeflatorSet,
    degree: usize,
) -> Result<HedgeResult> {
    check_shapes(claim, scenarios, deflators)?;
    let d = scenarios.n_drivers();
    let support = claim.support_or_all(d);
    if !scenarios.bond_is_deterministic() && support.len() < d {
        log::warn!("interest rate is random; it may not be measurable with respect to the claim's drivers");
    }
    let n_paths = scenarios.n_paths();
    let points = scenarios.n_points();
    let last = points - 1;

    let per_path: Vec<Result<(usize, Vec<f64>)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| path_flows(claim, scenarios, deflators, p))
        .collect();
    let mut expiry = Vec::with_capacity(n_paths);
    let mut flows = Vec::with_capacity(n_paths * points);
    for r in per_path {
        let (tau, f) = r?;
        expiry.push(tau);
        flows.extend(f);
    }
    let payoff: Vec<f64> = (0..n_paths)
        .map(|p| flows[p * points + expiry[p]] / deflators.h(p, expiry[p]))
        .collect();
    let rate: Vec<f64> = (0..n_paths)
        .flat_map(|p| {
            let f = &flows[p * points..(p + 1) * points];
            let tau = expiry[p];
            (0..points).map(move |k| {
                if k < tau {
                    f[k] / (deflators.h(p, k) * scenarios.grid().dt(k))
                } else {
                    0.0
                }
            })
        })
        .collect();

    // remaining deflated flows from step k on
    let mut remaining = vec![0.0; n_paths * points];
    for p in 0..n_paths {
        let mut acc = 0.0;
        for k in (0..points).rev() {
            acc += flows[p * points + k];
            remaining[p * points + k] = acc;
        }
    }

    let mut wealth = vec![0.0; n_paths * points];
    let mut degrees = vec![0; points];
    for p in 0..n_paths {
        wealth[p * points + expiry[p]] = payoff[p];
    }
    for k in (0..last).rev() {
        let alive: Vec<usize> = (0..n_paths).filter(|&p| expiry[p] > k).collect();
        if alive.is_empty() {
            continue;
        }
        let (states, width) = state_rows(scenarios, &alive, k);
        let y: Vec<f64> = alive.iter().map(|&p| remaining[p * points + k]).collect();
        let fit = fit_polynomial(&states, width, &y, degree)?;
        degrees[k] = fit.degree();
        for (r, &p) in alive.iter().enumerate() {
            wealth[p * points + k] = fit.predict_raw(&states[r * width..(r + 1) * width]) / deflators.h(p, k);
        }
    }

    // deflated gain M_k = H_k X_k + sum_{j<k} flows_j
    let gain = |p: usize, k: usize, acc: f64| deflators.h(p, k) * wealth[p * points + k] + acc;
    let mut phi = vec![0.0; n_paths * points * d];
    let mut increments = vec![0.0; n_paths * last];
    for p in 0..n_paths {
        let mut acc = 0.0;
        for k in 0..expiry[p] {
            let before = gain(p, k, acc);
            acc += flows[p * points + k];
            increments[p * last + k] = gain(p, k + 1, acc) - before;
        }
    }
    let grid = scenarios.grid();
    for k in 0..last {
        let alive: Vec<usize> = (0..n_paths).filter(|&p| expiry[p] > k).collect();
        if alive.is_empty() {
            continue;
        }
        let (states, width) = state_rows(scenarios, &alive, k);
        for &j in &support {
            let y: Vec<f64> = alive
                .iter()
                .map(|&p| increments[p * last + k] * scenarios.increments(p, k)[j] / grid.dt(k))
                .collect();
            let fit = fit_polynomial(&states, width, &y, degree)?;
            for (r, &p) in alive.iter().enumerate() {
                phi[(p * points + k) * d + j] = fit.predict(&states[r * width..(r + 1) * width]);
            }
        }
    }

    Ok(HedgeResult {
        n_paths,
        points,
        d,
        support,
        expiry,
        wealth,
        phi,
        payoff,
        rate,
        degrees,
    })
}

/// Portfolio solving `sigma^T pi = phi / H_0 + X theta` with residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub portfolio: PortfolioProcess,
    /// `|sigma^T pi - rhs|` per `(path, point)`, path-major.
    pub residual: Vec<f64>,
    pub max_residual: f64,
    pub tolerance: f64,
    /// True when some residual exceeded `tolerance * max(1, |rhs|)`; the claim
    /// is then not attainable with these drivers.
    pub flagged: bool,
    /// `X(tau-) - g` from running the portfolio forward from `X(0)`.
    pub terminal_error: Vec<f64>,
}

impl Replication {
    pub fn terminal_rmse(&self) -> f64 {
        let n = self.terminal_error.len().max(1) as f64;
        (self.terminal_error.iter().map(|e| e * e).sum::<f64>() / n).sqrt()
    }

    pub fn terminal_max_abs(&self) -> f64 {
        self.terminal_error.iter().map(|e| e.abs()).fold(0.0, f64::max)
    }
}

pub fn replication_portfolio(
    hedge: &HedgeResult,
    deflators: &DeflatorSet,
    scenarios: &ScenarioSet,
    tol: f64,
) -> Result<Replication> {
    if !(tol > 0.0) {
        return invalid("replication tolerance must be positive");
    }
    if hedge.n_paths != scenarios.n_paths() || hedge.points != scenarios.n_points() {
        return invalid("hedge and scenarios disagree in shape");
    }
    let (n, d) = (scenarios.n_assets(), scenarios.n_drivers());
    let points = hedge.points;
    let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..hedge.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut values = CoefficientValues::zeros(n, d);
            let mut vol_t = vec![0.0; d * n];
            let mut rhs = vec![0.0; d];
            let mut pi = vec![0.0; n];
            let mut res = vec![0.0; d];
            let mut amounts = vec![0.0; points * n];
            let mut residual = vec![0.0; points];
            for k in 0..hedge.expiry[p].min(points - 1) {
                scenarios.coefficients(p, k, &mut values);
                for i in 0..n {
                    for j in 0..d {
                        vol_t[j * n + i] = values.vol(i, j);
                    }
                }
                let h = deflators.h(p, k);
                let x = hedge.wealth(p, k);
                let theta = deflators.theta(p, k);
                for j in 0..d {
                    rhs[j] = hedge.phi(p, k)[j] / h + x * theta[j];
                }
                let proj = Projector::new(&vol_t, d, n, crate::deflator::DEFAULT_RANK_TOL)?;
                proj.apply(&vol_t, &rhs, &mut pi, &mut res);
                amounts[k * n..(k + 1) * n].copy_from_slice(&pi);
                residual[k] = res.iter().map(|x| x * x).sum::<f64>().sqrt();
            }
            Ok((amounts, residual))
        })
        .collect();
    let mut amounts = Vec::with_capacity(hedge.n_paths * points * n);
    let mut residual = Vec::with_capacity(hedge.n_paths * points);
    let mut flagged = false;
    for (p, r) in rows.into_iter().enumerate() {
        let (a, res) = r?;
        for k in 0..points {
            let rhs_norm = if k < hedge.expiry[p] {
                let h = deflators.h(p, k);
                let x = hedge.wealth(p, k);
                let theta = deflators.theta(p, k);
                (0..d)
                    .map(|j| (hedge.phi(p, k)[j] / h + x * theta[j]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            } else {
                0.0
            };
            if res[k] > tol * rhs_norm.max(1.0) {
                flagged = true;
            }
        }
        amounts.extend(a);
        residual.extend(res);
    }
    let max_residual = residual.iter().cloned().fold(0.0, f64::max);
    let portfolio = PortfolioProcess::from_amounts(hedge.n_paths, points, n, amounts)?;

    // forward check: capital X(0), pay out the rate, compare with g at expiry
    let rate: Vec<f64> = hedge.rate.iter().map(|c| -c).collect();
    let income = IncomeStream::with_rate(hedge.n_paths, points, rate)?;
    let w = wealth_paths(hedge.initial_wealth(), &portfolio, &income, scenarios)?;
    let terminal_error = (0..hedge.n_paths)
        .map(|p| w.wealth(p, hedge.expiry[p]) - hedge.payoff[p])
        .collect();
    Ok(Replication {
        portfolio,
        residual,
        max_residual,
        tolerance: tol,
        flagged,
        terminal_error,
    })
}

/// Income stream `-Y` for a hedged claim: the rate is paid out and the
/// payoff leaves at expiry.
pub fn claim_outflow(hedge: &HedgeResult) -> Result<IncomeStream> {
    let rate: Vec<f64> = hedge.rate.iter().map(|c| -c).collect();
    let mut income = IncomeStream::with_rate(hedge.n_paths, hedge.points, rate)?;
    if hedge.expiry.iter().all(|&k| k > 0) {
        income.add_lump(Lump {
            index: hedge.expiry.clone(),
            amount: hedge.payoff.iter().map(|g| -g).collect(),
        });
    }
    Ok(income)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttainabilityReport {
    pub support: Vec<usize>,
    pub k: usize,
    /// Smallest numerical rank of `sigma_S` over all sampled points.
    pub min_rank: usize,
    /// `rank(sigma_S) = k` everywhere.
    pub attainable_rank_condition: bool,
    /// `range(sigma_C)` equals the orthogonal complement of `range(sigma_S)`
    /// everywhere, `C` being the drivers outside the support.
    pub complement_range_condition: bool,
    /// The bond path does not depend on drivers outside the support.
    pub rate_measurable: bool,
}

impl AttainabilityReport {
    pub fn attainable(&self) -> bool {
        self.attainable_rank_condition && self.complement_range_condition
    }
}

fn columns(values: &CoefficientValues, cols: &[usize]) -> Vec<f64> {
    let n = values.n_assets();
    let mut out = Vec::with_capacity(n * cols.len());
    for i in 0..n {
        for &j in cols {
            out.push(values.vol(i, j));
        }
    }
    out
}

/// Checks the rank-`k` condition of the volatility columns in `support` and
/// that the remaining columns span exactly the orthogonal complement.
pub fn attainability_check(scenarios: &ScenarioSet, support: &[usize], tol: f64) -> Result<AttainabilityReport> {
    let (n, d) = (scenarios.n_assets(), scenarios.n_drivers());
    if support.is_empty() {
        return invalid("driver support must not be empty");
    }
    validate_support(support, d)?;
    if !(tol > 0.0) {
        return invalid("rank tolerance must be positive");
    }
    let complement: Vec<usize> = (0..d).filter(|j| !support.contains(j)).collect();
    let k = support.len();

    let check_point = |values: &CoefficientValues| -> Result<(usize, bool)> {
        let s = columns(values, support);
        let rank_s = Projector::new(&s, n, k, tol)?.rank();
        let complement_ok = if k > n {
            false
        } else if complement.is_empty() {
            rank_s == n
        } else {
            let c = columns(values, &complement);
            let rank_c = Projector::new(&c, n, complement.len(), tol)?.rank();
            let scale = values
                .volatility
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .max(f64::MIN_POSITIVE);
            let mut orthogonal = true;
            for a in 0..k {
                for b in 0..complement.len() {
                    let dot: f64 = (0..n).map(|i| s[i * k + a] * c[i * complement.len() + b]).sum();
                    if dot.abs() > tol.sqrt() * scale {
                        orthogonal = false;
                    }
                }
            }
            orthogonal && rank_s + rank_c == n
        };
        Ok((rank_s, complement_ok))
    };

    let mut min_rank = usize::MAX;
    let mut complement_ok = true;
    let mut values = scenarios.model().new_values();
    if scenarios.model().is_constant() {
        scenarios.coefficients(0, 0, &mut values);
        let (r, c) = check_point(&values)?;
        min_rank = r;
        complement_ok = c;
    } else {
        for p in 0..scenarios.n_paths() {
            for step in 0..scenarios.n_points() {
                scenarios.coefficients(p, step, &mut values);
                let (r, c) = check_point(&values)?;
                min_rank = min_rank.min(r);
                complement_ok &= c;
            }
        }
    }
    let rate_measurable = support.len() == d || scenarios.bond_is_deterministic();
    if !rate_measurable {
        log::warn!("interest rate is random and may depend on drivers outside the support");
    }
    Ok(AttainabilityReport {
        support: support.to_vec(),
        k,
        min_rank,
        attainable_rank_condition: min_rank == k,
        complement_range_condition: complement_ok,
        rate_measurable,
    })
}

/// One sample path of the hedge: `t, price_0, X, phi_j..., pi_i...`.
pub fn write_hedge_path_csv<W: Write>(
    writer: W,
    hedge: &HedgeResult,
    replication: Option<&Replication>,
    scenarios: &ScenarioSet,
    path: usize,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let (n, d) = (scenarios.n_assets(), scenarios.n_drivers());
    let mut header = vec!["step".to_string(), "t".into()];
    header.extend((0..n).map(|i| format!("price_{i}")));
    header.push("wealth".into());
    header.extend((0..d).map(|j| format!("phi_{j}")));
    if replication.is_some() {
        header.extend((0..n).map(|i| format!("pi_{i}")));
        header.push("residual".into());
    }
    w.write_record(&header)?;
    for k in 0..hedge.points {
        let mut row = vec![k.to_string(), scenarios.grid().t(k).to_string()];
        row.extend(scenarios.prices(path, k).iter().map(|x| x.to_string()));
        row.push(hedge.wealth(path, k).to_string());
        row.extend(hedge.phi(path, k).iter().map(|x| x.to_string()));
        if let Some(r) = replication {
            row.extend(r.portfolio.amounts(path, k).iter().map(|x| x.to_string()));
            row.push(r.residual[path * hedge.points + k].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
