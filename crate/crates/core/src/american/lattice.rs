//! Binomial lattices with per-node deflator weights, exact backward
//! induction, and exhaustive checks on small trees.
//!
//! Paths through a lattice of `N` steps are numbered `0..2^N`; bit `i` of the
//! path number is the move from step `i` to `i + 1` (set = up). The atom of a
//! path at step `k` is its lowest `k` bits.

use super::{FeasibilityReport, PayoffPaths, StoppingRule, TreeEstimator};
use crate::claims::{Payoff, StatePoint};
use crate::error::{invalid, Result};

/// Largest lattice that may be expanded into explicit paths.
pub const MAX_PATH_STEPS: usize = 20;

/// Recombining binomial lattice carrying the discounted payoff `Y` and the
/// deflator `H_0` at every node `(k, j)`, `j` being the number of up moves.
#[derive(Debug, Clone, PartialEq)]
pub struct BinomialLattice {
    n_steps: usize,
    prob_up: f64,
    y: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    price: Option<Vec<Vec<f64>>>,
}

impl BinomialLattice {
    /// Lattice with `H_0 = 1` at every node.
    pub fn new(prob_up: f64, y: Vec<Vec<f64>>) -> Result<Self> {
        let h = y.iter().map(|row| vec![1.0; row.len()]).collect();
        Self::with_deflator(prob_up, y, h)
    }

    pub fn with_deflator(prob_up: f64, y: Vec<Vec<f64>>, h: Vec<Vec<f64>>) -> Result<Self> {
        if !(prob_up > 0.0 && prob_up < 1.0) {
            return invalid("up probability must lie in (0, 1)");
        }
        if y.is_empty() {
            return invalid("lattice needs at least one level");
        }
        for (k, (row, hrow)) in y.iter().zip(&h).enumerate() {
            if row.len() != k + 1 || hrow.len() != k + 1 {
                return invalid(format!("lattice level {k} must have {} nodes", k + 1));
            }
            if row.iter().chain(hrow).any(|v| !v.is_finite()) {
                return invalid(format!("non-finite value on lattice level {k}"));
            }
        }
        if h.len() != y.len() {
            return invalid("deflator lattice has the wrong depth");
        }
        Ok(Self {
            n_steps: y.len() - 1,
            prob_up,
            y,
            h,
            price: None,
        })
    }

    /// Cox-Ross-Rubinstein tree for one stock with constant coefficients.
    /// The physical up probability is 1/2; the deflator at a node is the
    /// discount factor times the likelihood ratio of the risk-neutral to the
    /// physical move probabilities along any path to it.
    pub fn crr(
        p0: f64,
        rate: f64,
        dividend: f64,
        vol: f64,
        horizon: f64,
        n_steps: usize,
        settlement: &Payoff,
    ) -> Result<Self> {
        if !(p0 > 0.0 && vol > 0.0 && horizon > 0.0 && n_steps > 0) {
            return invalid("CRR lattice needs positive price, volatility, horizon and steps");
        }
        settlement.validate(1)?;
        let dt = horizon / n_steps as f64;
        let u = (vol * dt.sqrt()).exp();
        let d = 1.0 / u;
        let q = (((rate - dividend) * dt).exp() - d) / (u - d);
        if !(q > 0.0 && q < 1.0) {
            return invalid(format!(
                "risk-neutral probability {q} outside (0, 1); refine the lattice"
            ));
        }
        let p = 0.5;
        let (lu, ld) = ((q / p).ln(), ((1.0 - q) / (1.0 - p)).ln());
        let mut y = Vec::with_capacity(n_steps + 1);
        let mut h = Vec::with_capacity(n_steps + 1);
        let mut price = Vec::with_capacity(n_steps + 1);
        for k in 0..=n_steps {
            let t = k as f64 * dt;
            let bond = (rate * t).exp();
            let mut yr = Vec::with_capacity(k + 1);
            let mut hr = Vec::with_capacity(k + 1);
            let mut pr = Vec::with_capacity(k + 1);
            for j in 0..=k {
                let s = p0 * u.powi(j as i32) * d.powi((k - j) as i32);
                let hk = (-rate * t + j as f64 * lu + (k - j) as f64 * ld).exp();
                let l = settlement.evaluate(&StatePoint {
                    t,
                    prices: &[s],
                    aux: 0.0,
                    bond,
                });
                yr.push(hk * l);
                hr.push(hk);
                pr.push(s);
            }
            y.push(yr);
            h.push(hr);
            price.push(pr);
        }
        let mut lattice = Self::with_deflator(p, y, h)?;
        lattice.price = Some(price);
        Ok(lattice)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn prob_up(&self) -> f64 {
        self.prob_up
    }

    pub fn y(&self, k: usize, j: usize) -> f64 {
        self.y[k][j]
    }

    pub fn h(&self, k: usize, j: usize) -> f64 {
        self.h[k][j]
    }

    pub fn price(&self, k: usize, j: usize) -> Option<f64> {
        self.price.as_ref().map(|p| p[k][j])
    }

    /// `E[Y(T)]`, the value of exercising only at the horizon.
    pub fn european_value(&self) -> f64 {
        let p = self.prob_up;
        let mut v = self.y[self.n_steps].clone();
        for k in (0..self.n_steps).rev() {
            v = (0..=k).map(|j| p * v[j + 1] + (1.0 - p) * v[j]).collect();
        }
        v[0]
    }

    /// Expands the lattice into all `2^N` paths with their probabilities.
    pub fn paths(&self) -> Result<PayoffPaths> {
        let n = self.n_steps;
        if n > MAX_PATH_STEPS {
            return invalid(format!("cannot expand {n} steps into explicit paths"));
        }
        let count = 1usize << n;
        let points = n + 1;
        let mut y = Vec::with_capacity(count * points);
        let mut h = Vec::with_capacity(count * points);
        let mut w = Vec::with_capacity(count);
        for path in 0..count {
            for k in 0..points {
                let j = (path & ((1 << k) - 1)).count_ones() as usize;
                y.push(self.y[k][j]);
                h.push(self.h[k][j]);
            }
            let ups = path.count_ones() as i32;
            w.push(self.prob_up.powi(ups) * (1.0 - self.prob_up).powi(n as i32 - ups));
        }
        PayoffPaths::with_deflator(count, points, y, h, Some(w), vec![n; count])
    }

    /// Exact conditional expectations on the expanded paths.
    pub fn tree_estimator(&self) -> Result<TreeEstimator> {
        let paths = self.paths()?;
        tree_estimator_for(&paths)
    }
}

/// Prefix-atom estimator for paths numbered as described in the module docs.
pub fn tree_estimator_for(paths: &PayoffPaths) -> Result<TreeEstimator> {
    let points = paths.n_points();
    let atoms = (0..paths.n_paths())
        .flat_map(|p| (0..points).map(move |k| (p & ((1usize << k) - 1)) as u64))
        .collect();
    let weights = paths
        .weights()
        .map(|w| w.to_vec())
        .unwrap_or_else(|| vec![1.0 / paths.n_paths() as f64; paths.n_paths()]);
    TreeEstimator::new(points, atoms, weights)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatticeOracle {
    pub value: f64,
    /// `exercise[k][j]`: the payoff strictly beats continuation, or `k = N`.
    pub exercise: Vec<Vec<bool>>,
    pub envelope: Vec<Vec<f64>>,
    /// `E[V_{k+1} | node]` for `k < N`.
    pub continuation: Vec<Vec<f64>>,
}

impl LatticeOracle {
    /// Exercise boundary per step as `(step, lowest, highest)` node prices in
    /// the exercise region.
    pub fn exercise_boundary(&self, lattice: &BinomialLattice) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for (k, row) in self.exercise.iter().enumerate() {
            let prices: Vec<f64> = row
                .iter()
                .enumerate()
                .filter(|(_, &e)| e)
                .filter_map(|(j, _)| lattice.price(k, j))
                .collect();
            if let (Some(lo), Some(hi)) = (
                prices.iter().cloned().reduce(f64::min),
                prices.iter().cloned().reduce(f64::max),
            ) {
                out.push((k, lo, hi));
            }
        }
        out
    }
}

/// Backward induction `V_k = max(Y_k, p V_{k+1}^up + (1 - p) V_{k+1}^down)`.
pub fn snell_lattice_oracle(lattice: &BinomialLattice) -> LatticeOracle {
    let n = lattice.n_steps;
    let p = lattice.prob_up;
    let mut envelope = vec![Vec::new(); n + 1];
    let mut exercise = vec![Vec::new(); n + 1];
    let mut continuation = vec![Vec::new(); n];
    envelope[n] = lattice.y[n].clone();
    exercise[n] = vec![true; n + 1];
    for k in (0..n).rev() {
        let next = &envelope[k + 1];
        let cont: Vec<f64> = (0..=k).map(|j| p * next[j + 1] + (1.0 - p) * next[j]).collect();
        exercise[k] = (0..=k).map(|j| lattice.y[k][j] > cont[j]).collect();
        envelope[k] = (0..=k).map(|j| lattice.y[k][j].max(cont[j])).collect();
        continuation[k] = cont;
    }
    LatticeOracle {
        value: envelope[0][0],
        exercise,
        envelope,
        continuation,
    }
}

/// Backward induction on the full non-recombining tree of the expanded
/// paths, visiting every prefix separately. `Y` must depend only on the
/// prefix, as it does for expanded lattices.
pub fn tree_backward_induction(paths: &PayoffPaths, prob_up: f64) -> Result<f64> {
    let n = paths.n_points() - 1;
    if paths.n_paths() != 1 << n {
        return invalid("tree recursion needs exactly 2^N paths");
    }
    let mut v: Vec<f64> = (0..1usize << n).map(|a| paths.y(a, n)).collect();
    for k in (0..n).rev() {
        v = (0..1usize << k)
            .map(|a| {
                let cont = prob_up * v[a | (1 << k)] + (1.0 - prob_up) * v[a];
                paths.y(a, k).max(cont)
            })
            .collect();
    }
    Ok(v[0])
}

/// Every stopping time on a binary tree of `n_steps`, each given as the
/// exercise step of every path. There are `s(n) = 1 + s(n-1)^2` of them
/// (2, 5, 26, 677, 458330 for one to five steps).
pub fn enumerate_stopping_times(n_steps: usize) -> Result<Vec<Vec<u8>>> {
    if n_steps > 5 {
        return invalid("enumeration beyond five steps does not fit in memory");
    }
    fn rec(step: usize, n: usize) -> Vec<Vec<u8>> {
        if step == n {
            return vec![vec![n as u8]];
        }
        let leaves = 1usize << (n - step);
        let sub = rec(step + 1, n);
        let mut out = Vec::with_capacity(1 + sub.len() * sub.len());
        out.push(vec![step as u8; leaves]);
        for up in &sub {
            for down in &sub {
                out.push(
                    (0..leaves)
                        .map(|q| if q & 1 == 1 { up[q >> 1] } else { down[q >> 1] })
                        .collect(),
                );
            }
        }
        out
    }
    Ok(rec(0, n_steps))
}

/// `max_tau E[Y(tau)]` by evaluating every stopping time of the tree.
pub fn brute_force_sup(paths: &PayoffPaths) -> Result<(f64, usize)> {
    let n = paths.n_points() - 1;
    if paths.n_paths() != 1 << n {
        return invalid("brute force needs exactly 2^N paths");
    }
    let rules = enumerate_stopping_times(n)?;
    let mut best = f64::NEG_INFINITY;
    for r in &rules {
        let rule = StoppingRule {
            index: r.iter().map(|&k| k as usize).collect(),
        };
        best = best.max(paths.value(&rule).estimate);
    }
    Ok((best, rules.len()))
}

/// Feasibility of starting from `capital` and following the martingale part
/// of the exact envelope. `argmin` is `(node, step)`.
pub fn lattice_feasibility(lattice: &BinomialLattice, oracle: &LatticeOracle, capital: f64) -> FeasibilityReport {
    let n = lattice.n_steps;
    let v0 = oracle.value;
    // smallest accumulated V_j - E[V_{j+1}] over the paths reaching each node
    let mut min_drift = vec![0.0];
    let mut min_slack = f64::INFINITY;
    let mut argmin = (0, 0);
    for k in 0..=n {
        for j in 0..=k {
            let w = (capital - v0) + oracle.envelope[k][j] + min_drift[j];
            let slack = (w - lattice.y[k][j]) / lattice.h[k][j];
            if slack < min_slack {
                min_slack = slack;
                argmin = (j, k);
            }
        }
        if k == n {
            break;
        }
        let gap: Vec<f64> = (0..=k)
            .map(|j| oracle.envelope[k][j] - oracle.continuation[k][j])
            .collect();
        min_drift = (0..=k + 1)
            .map(|j| {
                let from_down = (j <= k).then(|| min_drift[j] + gap[j]);
                let from_up = (j >= 1).then(|| min_drift[j - 1] + gap[j - 1]);
                match (from_down, from_up) {
                    (Some(a), Some(b)) => a.min(b),
                    (Some(a), None) | (None, Some(a)) => a,
                    (None, None) => unreachable!(),
                }
            })
            .collect();
    }
    FeasibilityReport {
        capital,
        envelope_value: v0,
        min_slack,
        argmin,
        violated: !(min_slack >= 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{combine_stopping_times, fixed_date_candidates, improve_to_value, TournamentOrder};
    use super::*;
    use crate::claims::Underlying;

    fn put() -> Payoff {
        Payoff::Put {
            strike: 100.0,
            underlying: Underlying::Asset(0),
        }
    }

    #[test]
    fn stopping_time_counts() {
        let counts: Vec<usize> = (0..=4).map(|n| enumerate_stopping_times(n).unwrap().len()).collect();
        assert_eq!(counts, vec![1, 2, 5, 26, 677]);
    }

    #[test]
    fn constant_settlement_is_its_own_value() {
        let y = vec![vec![3.0], vec![3.0, 3.0], vec![3.0, 3.0, 3.0]];
        let l = BinomialLattice::new(0.3, y).unwrap();
        let o = snell_lattice_oracle(&l);
        assert_eq!(o.value, 3.0);
    }

    #[test]
    fn crr_put_matches_classic_recursion() {
        let l = BinomialLattice::crr(100.0, 0.05, 0.0, 0.2, 1.0, 200, &put()).unwrap();
        let o = snell_lattice_oracle(&l);
        // undeflated CRR recursion with risk-neutral weights
        let dt: f64 = 1.0 / 200.0;
        let u = (0.2 * dt.sqrt()).exp();
        let d = 1.0 / u;
        let q = ((0.05 * dt).exp() - d) / (u - d);
        let disc = (-0.05 * dt).exp();
        let payoff = |k: usize, j: usize| (100.0 - 100.0 * u.powi(j as i32) * d.powi((k - j) as i32)).max(0.0);
        let mut v: Vec<f64> = (0..=200).map(|j| payoff(200, j)).collect();
        for k in (0..200).rev() {
            v = (0..=k)
                .map(|j| payoff(k, j).max(disc * (q * v[j + 1] + (1.0 - q) * v[j])))
                .collect();
        }
        assert!((o.value - v[0]).abs() < 1e-10, "{} vs {}", o.value, v[0]);
    }

    #[test]
    fn tournament_and_tree_and_brute_force_agree() {
        let l = BinomialLattice::crr(100.0, 0.05, 0.0, 0.2, 1.0, 5, &put()).unwrap();
        let o = snell_lattice_oracle(&l);
        let paths = l.paths().unwrap();
        let est = l.tree_estimator().unwrap();
        let trace = improve_to_value(
            &fixed_date_candidates(&paths),
            &paths,
            &est,
            TournamentOrder::HorizonFirst,
            1,
        )
        .unwrap();
        assert!((trace.value.estimate - o.value).abs() < 1e-12);
        assert!(trace.max_decrease <= 0.0);
        assert!((tree_backward_induction(&paths, 0.5).unwrap() - o.value).abs() < 1e-12);
        let (best, count) = brute_force_sup(&paths).unwrap();
        assert_eq!(count, 458_330);
        assert!((best - o.value).abs() < 1e-12);
    }

    #[test]
    fn ascending_fold_can_stop_short() {
        // Y0 = 1.5, Y1 in {2 (up), 0 (down)}; Y2 = 0 after up and 2 after down
        let y = vec![
            1.5, 0.0, 2.0, // path 0: down, down
            1.5, 2.0, 0.0, // path 1: up, down
            1.5, 0.0, 2.0, // path 2: down, up
            1.5, 2.0, 0.0, // path 3: up, up
        ];
        let paths = PayoffPaths::new(4, 3, y, Some(vec![0.25; 4])).unwrap();
        let est = tree_estimator_for(&paths).unwrap();
        let cands = fixed_date_candidates(&paths);
        let asc = improve_to_value(&cands, &paths, &est, TournamentOrder::Ascending, 3).unwrap();
        let hf = improve_to_value(&cands, &paths, &est, TournamentOrder::HorizonFirst, 1).unwrap();
        assert_eq!(asc.value.estimate, 1.5);
        assert_eq!(hf.value.estimate, 2.0);
        assert_eq!(tree_backward_induction(&paths, 0.5).unwrap(), 2.0);
        let a = StoppingRule::fixed(&paths, 0);
        let b = StoppingRule::fixed(&paths, 1);
        assert_eq!(combine_stopping_times(&a, &b, &paths, &est).unwrap(), a);
    }

    #[test]
    fn american_call_without_dividends_is_european() {
        let call = Payoff::Call {
            strike: 100.0,
            underlying: Underlying::Asset(0),
        };
        let l = BinomialLattice::crr(100.0, 0.05, 0.0, 0.2, 1.0, 300, &call).unwrap();
        assert_eq!(snell_lattice_oracle(&l).value, l.european_value());
    }

    #[test]
    fn feasibility_on_lattice() {
        let l = BinomialLattice::crr(100.0, 0.05, 0.0, 0.2, 1.0, 50, &put()).unwrap();
        let o = snell_lattice_oracle(&l);
        let ok = lattice_feasibility(&l, &o, o.value);
        assert!(ok.min_slack >= 0.0 && !ok.violated);
        let under = lattice_feasibility(&l, &o, 0.5 * o.value);
        assert!(under.violated);
        let bounds = o.exercise_boundary(&l);
        assert!(bounds.iter().any(|&(k, _, hi)| k < 50 && hi < 100.0));
    }

    #[test]
    fn invalid_lattices() {
        assert!(BinomialLattice::new(1.0, vec![vec![0.0]]).is_err());
        assert!(BinomialLattice::new(0.5, vec![vec![0.0], vec![0.0]]).is_err());
        assert!(enumerate_stopping_times(6).is_err());
    }
}
