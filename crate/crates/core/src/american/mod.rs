//! American claims: discounted payoff `Y = int H_0 dGamma + L H_0`, the
//! pairwise stopping-time combinator, tournament improvement toward
//! `sup_tau E[Y(tau)]`, lattice oracles and a feasibility diagnostic.

mod estimator;
mod lattice;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use estimator::{ConditionalExpectation, RegressionEstimator, TreeEstimator};
pub use lattice::{
    brute_force_sup, enumerate_stopping_times, lattice_feasibility, snell_lattice_oracle, tree_backward_induction,
    tree_estimator_for, BinomialLattice, LatticeOracle, MAX_PATH_STEPS,
};

use crate::claims::{ClaimSpec, StatePoint};
use crate::deflator::DeflatorSet;
use crate::error::{invalid, Error, Result};
use crate::european::{state_rows, ValuationReport, DEFAULT_DEGREE};
use crate::regression::RegressionFit;
use crate::sde::ScenarioSet;
use crate::stats::Estimate;

/// Discounted payoff `Y[path][point]` with optional path probabilities.
///
/// Without weights the paths are an equally weighted Monte Carlo sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PayoffPaths {
    n_paths: usize,
    points: usize,
    y: Vec<f64>,
    /// Deflator `H_0` per point, used to express slack in undeflated units.
    h: Vec<f64>,
    weights: Option<Vec<f64>>,
    /// Last admissible exercise index per path.
    horizon: Vec<usize>,
}

impl PayoffPaths {
    /// Paths with `H_0 = 1` and the full grid as horizon.
    pub fn new(n_paths: usize, points: usize, y: Vec<f64>, weights: Option<Vec<f64>>) -> Result<Self> {
        let h = vec![1.0; y.len()];
        Self::with_deflator(n_paths, points, y, h, weights, vec![points - 1; n_paths])
    }

    pub fn with_deflator(
        n_paths: usize,
        points: usize,
        y: Vec<f64>,
        h: Vec<f64>,
        weights: Option<Vec<f64>>,
        horizon: Vec<usize>,
    ) -> Result<Self> {
        if points == 0 || y.len() != n_paths * points || h.len() != y.len() || horizon.len() != n_paths {
            return invalid("payoff table shape mismatch");
        }
        if let Some(w) = &weights {
            if w.len() != n_paths || w.iter().any(|x| !(*x >= 0.0)) {
                return invalid("path weights must be nonnegative, one per path");
            }
        }
        if horizon.iter().any(|&k| k >= points) {
            return invalid("horizon index beyond grid");
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "discounted payoff",
                path: i / points,
            });
        }
        Ok(Self {
            n_paths,
            points,
            y,
            h,
            weights,
            horizon,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_points(&self) -> usize {
        self.points
    }

    #[inline]
    pub fn y(&self, path: usize, step: usize) -> f64 {
        self.y[path * self.points + step]
    }

    #[inline]
    pub fn h(&self, path: usize, step: usize) -> f64 {
        self.h[path * self.points + step]
    }

    pub fn horizon(&self, path: usize) -> usize {
        self.horizon[path]
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// `E[Y(tau)]`, exact under path weights, a sample mean otherwise.
    pub fn value(&self, rule: &StoppingRule) -> Estimate {
        let samples: Vec<f64> = (0..self.n_paths).map(|p| self.y(p, rule.index[p])).collect();
        match &self.weights {
            Some(w) => Estimate::exact(&samples, w),
            None => Estimate::from_samples(&samples),
        }
    }

    /// Sample maximum of `Y` over all paths and points.
    pub fn max_value(&self) -> f64 {
        self.y.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest `Y`, the bounded-below monitor.
    pub fn min_value(&self) -> f64 {
        self.y.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Restriction to a subset of paths; weights are renormalized.
    pub fn subset(&self, paths: &[usize]) -> Result<Self> {
        let pick = |v: &[f64]| -> Vec<f64> {
            paths
                .iter()
                .flat_map(|&p| v[p * self.points..(p + 1) * self.points].to_vec())
                .collect()
        };
        let weights = self.weights.as_ref().map(|w| {
            let total: f64 = paths.iter().map(|&p| w[p]).sum();
            paths.iter().map(|&p| w[p] / total).collect()
        });
        Self::with_deflator(
            paths.len(),
            self.points,
            pick(&self.y),
            pick(&self.h),
            weights,
            paths.iter().map(|&p| self.horizon[p]).collect(),
        )
    }
}

/// `Y(t_k) = sum_{j<k} H_0 c dt + L(t_k) H_0(t_k)` up to the claim's horizon,
/// frozen afterwards.
pub fn discounted_payoff(claim: &ClaimSpec, scenarios: &ScenarioSet, deflators: &DeflatorSet) -> Result<PayoffPaths> {
    claim.validate(scenarios.n_assets(), scenarios.n_drivers())?;
    if deflators.n_paths() != scenarios.n_paths() || deflators.n_points() != scenarios.n_points() {
        return invalid("deflators and scenarios disagree in shape");
    }
    let (n_paths, points) = (scenarios.n_paths(), scenarios.n_points());
    let grid = scenarios.grid();
    let mut y = Vec::with_capacity(n_paths * points);
    let mut h = Vec::with_capacity(n_paths * points);
    let mut horizon = Vec::with_capacity(n_paths);
    for p in 0..n_paths {
        let tau = claim.expiry.index(scenarios, p);
        horizon.push(tau);
        let mut income = 0.0;
        let mut frozen = 0.0;
        for k in 0..points {
            let hk = deflators.h(p, k);
            h.push(hk);
            if k > tau {
                y.push(frozen);
                continue;
            }
            let s = StatePoint::at(scenarios, p, k);
            let v = income + claim.payoff_checked(&s, p)? * hk;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "discounted payoff",
                    path: p,
                });
            }
            y.push(v);
            frozen = v;
            if k + 1 < points && !claim.rate.is_zero() {
                income += hk * claim.rate_checked(&s, p)? * grid.dt(k);
            }
        }
    }
    PayoffPaths::with_deflator(n_paths, points, y, h, None, horizon)
}

/// Exercise index per path; adapted by construction when built from fixed
/// dates, per-step state predicates or the combinator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub index: Vec<usize>,
}

impl StoppingRule {
    /// Exercise at step `k`, or at the horizon if that comes first.
    pub fn fixed(payoff: &PayoffPaths, k: usize) -> Self {
        Self {
            index: (0..payoff.n_paths()).map(|p| k.min(payoff.horizon(p))).collect(),
        }
    }

    pub fn horizon(payoff: &PayoffPaths) -> Self {
        Self {
            index: payoff.horizon.clone(),
        }
    }

    fn check(&self, payoff: &PayoffPaths) -> Result<()> {
        if self.index.len() != payoff.n_paths() {
            return invalid("stopping rule and payoff disagree in path count");
        }
        if let Some(p) = (0..payoff.n_paths()).find(|&p| self.index[p] > payoff.horizon(p)) {
            return invalid(format!("stopping rule exceeds the horizon on path {p}"));
        }
        Ok(())
    }
}

/// `tau' = tau1 ^ tau2` where `E[Y(tau1 v tau2) | F(tau1 ^ tau2)] < Y(tau1 ^ tau2)`,
/// `tau1 v tau2` elsewhere. Ties continue to the later time.
pub fn combine_stopping_times(
    tau1: &StoppingRule,
    tau2: &StoppingRule,
    payoff: &PayoffPaths,
    estimator: &dyn ConditionalExpectation,
) -> Result<StoppingRule> {
    tau1.check(payoff)?;
    tau2.check(payoff)?;
    let mut out = tau1.index.clone();
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); payoff.n_points()];
    for p in 0..payoff.n_paths() {
        let (a, b) = (tau1.index[p], tau2.index[p]);
        if a != b {
            groups[a.min(b)].push(p);
        }
    }
    for (m, paths) in groups.iter().enumerate() {
        if paths.is_empty() {
            continue;
        }
        let later: Vec<usize> = paths.iter().map(|&p| tau1.index[p].max(tau2.index[p])).collect();
        let target: Vec<f64> = paths.iter().zip(&later).map(|(&p, &l)| payoff.y(p, l)).collect();
        let cond = estimator.conditional_mean(m, paths, &target)?;
        for ((&p, &l), c) in paths.iter().zip(&later).zip(cond) {
            out[p] = if c < payoff.y(p, m) { m } else { l };
        }
    }
    Ok(StoppingRule { index: out })
}

/// Order in which the candidate rules are folded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TournamentOrder {
    /// `acc = c_last`, then `acc = combine(c_k, acc)` for decreasing `k`.
    /// With exact conditional expectations and all fixed dates as candidates
    /// this is backward induction.
    #[default]
    HorizonFirst,
    /// `acc = c_0`, then `acc = combine(acc, c_k)` for increasing `k`.
    Ascending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    pub candidate: usize,
    pub value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTrace {
    pub order: TournamentOrder,
    pub entries: Vec<TraceEntry>,
    pub rule: StoppingRule,
    pub value: Estimate,
    /// Sample maximum of `Y`; no rule can beat it.
    pub payoff_max: f64,
    /// The final value reached `payoff_max`, a sign the supremum may be
    /// degenerate.
    pub near_payoff_max: bool,
    /// Largest drop between consecutive entries; zero under exact
    /// conditional expectations.
    pub max_decrease: f64,
}

impl ImprovementTrace {
    pub fn values(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.value).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["round", "candidate", "value", "std_error"])?;
        for e in &self.entries {
            w.write_record(&[
                e.round.to_string(),
                e.candidate.to_string(),
                e.value.to_string(),
                e.std_error.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fixed-date rules for every grid step.
pub fn fixed_date_candidates(payoff: &PayoffPaths) -> Vec<StoppingRule> {
    (0..payoff.n_points()).map(|k| StoppingRule::fixed(payoff, k)).collect()
}

/// Folds the candidates with the combinator `rounds` times and records the
/// value after every combination.
pub fn improve_to_value(
    candidates: &[StoppingRule],
    payoff: &PayoffPaths,
    estimator: &dyn ConditionalExpectation,
    order: TournamentOrder,
    rounds: usize,
) -> Result<ImprovementTrace> {
    if candidates.is_empty() {
        return invalid("at least one candidate rule is required");
    }
    for c in candidates {
        c.check(payoff)?;
    }
    let seq: Vec<usize> = match order {
        TournamentOrder::Ascending => (0..candidates.len()).collect(),
        TournamentOrder::HorizonFirst => (0..candidates.len()).rev().collect(),
    };
    let mut acc = candidates[seq[0]].clone();
    let first = payoff.value(&acc);
    let mut entries = vec![TraceEntry {
        round: 0,
        candidate: seq[0],
        value: first.estimate,
        std_error: first.std_error,
    }];
    for round in 0..rounds.max(1) {
        let start = usize::from(round == 0);
        for &c in &seq[start..] {
            acc = match order {
                TournamentOrder::Ascending => combine_stopping_times(&acc, &candidates[c], payoff, estimator)?,
                TournamentOrder::HorizonFirst => combine_stopping_times(&candidates[c], &acc, payoff, estimator)?,
            };
            let v = payoff.value(&acc);
            entries.push(TraceEntry {
                round,
                candidate: c,
                value: v.estimate,
                std_error: v.std_error,
            });
        }
    }
    let value = payoff.value(&acc);
    let payoff_max = payoff.max_value();
    let max_decrease = entries.windows(2).map(|w| w[0].value - w[1].value).fold(0.0, f64::max);
    if max_decrease > 0.0 {
        log::debug!("improvement trace decreased by up to {max_decrease:e}");
    }
    Ok(ImprovementTrace {
        order,
        entries,
        rule: acc,
        near_payoff_max: value.estimate >= payoff_max - 1e-12 * payoff_max.abs().max(1.0),
        value,
        payoff_max,
        max_decrease,
    })
}

/// Exercise policy from per-step continuation fits: stop at the first step
/// where `Y > H_0 * fit(state)`.
#[derive(Debug, Clone)]
pub struct ExercisePolicy {
    fits: Vec<Option<RegressionFit>>,
}

impl ExercisePolicy {
    pub fn apply(&self, payoff: &PayoffPaths, scenarios: &ScenarioSet, paths: &[usize]) -> StoppingRule {
        let index = paths
            .iter()
            .enumerate()
            .map(|(local, &p)| {
                let horizon = payoff.horizon(local);
                (0..horizon)
                    .find(|&k| match &self.fits[k] {
                        Some(fit) => {
                            let (state, _) = state_rows(scenarios, &[p], k);
                            payoff.y(local, k) > payoff.h(local, k) * fit.predict(&state)
                        }
                        None => false,
                    })
                    .unwrap_or(horizon)
            })
            .collect();
        StoppingRule { index }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmericanConfig {
    pub degree: usize,
    pub order: TournamentOrder,
    pub rounds: usize,
}

impl Default for AmericanConfig {
    fn default() -> Self {
        Self {
            degree: DEFAULT_DEGREE,
            order: TournamentOrder::HorizonFirst,
            rounds: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AmericanResult {
    /// Value of the learned rule. Out of sample when `out_of_sample` is set.
    pub report: ValuationReport,
    pub trace: ImprovementTrace,
    /// Rule on the evaluation paths.
    pub rule: StoppingRule,
    /// Paths the rule in `rule` refers to.
    pub evaluation_paths: Vec<usize>,
    pub out_of_sample: bool,
    pub min_payoff: f64,
}

/// Learns a rule with the regression tournament on the first half of the
/// paths and values it on the second half, giving a low-biased estimate.
/// The ascending order has no step-local policy form, so it is valued in
/// sample.
pub fn price_sacc(
    claim: &ClaimSpec,
    scenarios: &ScenarioSet,
    deflators: &DeflatorSet,
    config: &AmericanConfig,
) -> Result<AmericanResult> {
    let payoff = discounted_payoff(claim, scenarios, deflators)?;
    let n = scenarios.n_paths();
    if n < 4 {
        return invalid("need at least four paths to price an American claim");
    }
    let points = scenarios.n_points();
    let all: Vec<usize> = (0..n).collect();
    let out_of_sample = config.order == TournamentOrder::HorizonFirst;
    let (train, eval): (Vec<usize>, Vec<usize>) = if out_of_sample {
        (all[..n / 2].to_vec(), all[n / 2..].to_vec())
    } else {
        (all.clone(), all.clone())
    };

    let train_payoff = payoff.subset(&train)?;
    let (states, width) = {
        let mut rows = Vec::new();
        let mut width = 0;
        for &p in &train {
            for k in 0..points {
                let (r, w) = state_rows(scenarios, &[p], k);
                rows.extend(r);
                width = w;
            }
        }
        (rows, width)
    };
    let h: Vec<f64> = train
        .iter()
        .flat_map(|&p| (0..points).map(move |k| deflators.h(p, k)))
        .collect();
    let estimator = RegressionEstimator::new(points, width, states, h, config.degree)?;
    let candidates = fixed_date_candidates(&train_payoff);
    let trace = improve_to_value(&candidates, &train_payoff, &estimator, config.order, config.rounds)?;

    let eval_payoff = payoff.subset(&eval)?;
    let rule = if out_of_sample {
        ExercisePolicy { fits: estimator.fits() }.apply(&eval_payoff, scenarios, &eval)
    } else {
        trace.rule.clone()
    };
    let samples: Vec<f64> = (0..eval.len()).map(|i| eval_payoff.y(i, rule.index[i])).collect();
    let mut report = ValuationReport::from_samples(&samples, deflators, payoff.min_value());
    report.tameness_min = payoff.min_value();
    Ok(AmericanResult {
        report,
        trace,
        rule,
        evaluation_paths: eval,
        out_of_sample,
        min_payoff: payoff.min_value(),
    })
}

/// Minimum of `X - L` for the wealth that starts from `capital` and follows
/// the martingale part of the estimated Snell envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub capital: f64,
    /// Envelope value at time zero.
    pub envelope_value: f64,
    pub min_slack: f64,
    pub argmin: (usize, usize),
    pub violated: bool,
}

/// Estimates the envelope `V_k = max(Y_k, E[V_{k+1} | F_k])` and the
/// deflated wealth `W_k = capital - V_0 + V_k + sum_{j<k} (V_j - E[V_{j+1} | F_j])`,
/// which is `capital` plus the martingale increments of `V`. Slack is
/// `(W_k - Y_k) / H_0(t_k)`.
pub fn exercise_feasibility_check(
    payoff: &PayoffPaths,
    estimator: &dyn ConditionalExpectation,
    capital: f64,
) -> Result<FeasibilityReport> {
    let (n, points) = (payoff.n_paths(), payoff.n_points());
    let mut v = vec![0.0; n * points];
    let mut cont = vec![0.0; n * points];
    for p in 0..n {
        let hz = payoff.horizon(p);
        for k in hz..points {
            v[p * points + k] = payoff.y(p, hz);
        }
    }
    for k in (0..points - 1).rev() {
        let alive: Vec<usize> = (0..n).filter(|&p| payoff.horizon(p) > k).collect();
        if alive.is_empty() {
            continue;
        }
        let target: Vec<f64> = alive.iter().map(|&p| v[p * points + k + 1]).collect();
        let c = estimator.conditional_mean(k, &alive, &target)?;
        for (&p, c) in alive.iter().zip(c) {
            cont[p * points + k] = c;
            v[p * points + k] = payoff.y(p, k).max(c);
        }
    }
    let envelope_value = match payoff.weights() {
        Some(w) => (0..n).map(|p| w[p] * v[p * points]).sum(),
        None => (0..n).map(|p| v[p * points]).sum::<f64>() / n as f64,
    };
    let mut min_slack = f64::INFINITY;
    let mut argmin = (0, 0);
    for p in 0..n {
        let base = capital - v[p * points];
        let mut drift = 0.0;
        for k in 0..=payoff.horizon(p) {
            let w = base + v[p * points + k] + drift;
            let slack = (w - payoff.y(p, k)) / payoff.h(p, k);
            if slack < min_slack {
                min_slack = slack;
                argmin = (p, k);
            }
            if k < payoff.horizon(p) {
                drift += v[p * points + k] - cont[p * points + k];
            }
        }
    }
    Ok(FeasibilityReport {
        capital,
        envelope_value,
        min_slack,
        argmin,
        violated: !(min_slack >= 0.0),
    })
}

/// Per step, the range of asset-0 prices at which the rule exercised.
pub fn write_exercise_region_csv<W: Write>(
    writer: W,
    rule: &StoppingRule,
    paths: &[usize],
    scenarios: &ScenarioSet,
) -> Result<()> {
    let points = scenarios.n_points();
    let mut lo = vec![f64::INFINITY; points];
    let mut hi = vec![f64::NEG_INFINITY; points];
    let mut count = vec![0usize; points];
    for (local, &p) in paths.iter().enumerate() {
        let k = rule.index[local];
        let x = scenarios.price(p, k, 0);
        lo[k] = lo[k].min(x);
        hi[k] = hi[k].max(x);
        count[k] += 1;
    }
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "t", "exercised", "price_min", "price_max"])?;
    for k in 0..points {
        if count[k] > 0 {
            w.write_record(&[
                k.to_string(),
                scenarios.grid().t(k).to_string(),
                count[k].to_string(),
                lo[k].to_string(),
                hi[k].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::claims::{Payoff, RateFamily, Underlying};
    use crate::deflator::{deflator_paths, DEFAULT_RANK_TOL};
    use crate::sde::{simulate_scenarios, MarketModel, TimeGrid};

    fn bs(paths: usize, steps: usize, seed: u64, drift: f64) -> (ScenarioSet, DeflatorSet) {
        let m = MarketModel::black_scholes(100.0, 0.0, drift, 0.0, 0.2).unwrap();
        let s = simulate_scenarios(&m, &TimeGrid::uniform(1.0, steps).unwrap(), paths, seed).unwrap();
        let f = deflator_paths(&s, DEFAULT_RANK_TOL).unwrap();
        (s, f)
    }

    #[test]
    fn constant_settlement_without_risk_premium() {
        let (s, f) = bs(5, 4, 1, 0.0);
        let y = discounted_payoff(&ClaimSpec::new(Payoff::Constant { value: 1.0 }), &s, &f).unwrap();
        for p in 0..5 {
            for k in 0..=4 {
                assert_eq!(y.y(p, k), 1.0);
            }
        }
        let claim = ClaimSpec::new(Payoff::Constant { value: 0.0 }).with_rate(RateFamily::Constant { value: 1.0 });
        let y = discounted_payoff(&claim, &s, &f).unwrap();
        for k in 0..=4 {
            assert!((y.y(2, k) - s.grid().t(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn put_payoff_composes_deflator() {
        let (s, f) = bs(3, 5, 2, 0.06);
        let claim = ClaimSpec::new(Payoff::Put {
            strike: 100.0,
            underlying: Underlying::Asset(0),
        });
        let y = discounted_payoff(&claim, &s, &f).unwrap();
        for k in 0..=5 {
            let expect = f.z(1, k) * s.discount(1, k) * (100.0 - s.price(1, k, 0)).max(0.0);
            assert!((y.y(1, k) - expect).abs() <= 1e-14 * (1.0 + expect));
        }
        assert_eq!(y.y(0, 0), 0.0);
    }

    #[test]
    fn combinator_is_idempotent_and_prefers_later_for_increasing_payoff() {
        let (s, f) = bs(40, 6, 3, 0.0);
        let claim = ClaimSpec::new(Payoff::Constant { value: 0.0 }).with_rate(RateFamily::Constant { value: 1.0 });
        let y = discounted_payoff(&claim, &s, &f).unwrap();
        let tree_free = RegressionEstimator::new(
            7,
            1,
            (0..40).flat_map(|p| (0..7).map(move |k| (p * 7 + k) as f64)).collect(),
            vec![1.0; 280],
            2,
        )
        .unwrap();
        let a = StoppingRule::fixed(&y, 2);
        assert_eq!(combine_stopping_times(&a, &a, &y, &tree_free).unwrap(), a);
        let b = StoppingRule::fixed(&y, 5);
        let c = combine_stopping_times(&a, &b, &y, &tree_free).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn single_candidate_trace() {
        let y = PayoffPaths::new(2, 2, vec![1.0, 0.0, 3.0, 0.0], Some(vec![0.5, 0.5])).unwrap();
        let est = TreeEstimator::new(2, vec![0, 0, 0, 1], vec![0.5, 0.5]).unwrap();
        let rule = StoppingRule::fixed(&y, 0);
        let t = improve_to_value(std::slice::from_ref(&rule), &y, &est, TournamentOrder::HorizonFirst, 1).unwrap();
        assert_eq!(t.values(), vec![2.0]);
        assert_eq!(t.rule, rule);
        assert!(improve_to_value(&[], &y, &est, TournamentOrder::Ascending, 1).is_err());
    }

    #[test]
    fn nonnegative_income_without_settlement_waits() {
        let (s, f) = bs(200, 5, 4, 0.0);
        let claim = ClaimSpec::new(Payoff::Constant { value: 0.0 }).with_rate(RateFamily::Constant { value: 1.0 });
        let r = price_sacc(&claim, &s, &f, &AmericanConfig::default()).unwrap();
        assert!(r.rule.index.iter().all(|&k| k == 5));
        let euro = crate::european::price_secc(&claim, &s, &f).unwrap();
        assert!((r.report.estimate - euro.estimate).abs() < 1e-12);
    }
}
