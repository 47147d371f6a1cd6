//! Conditional-expectation estimators used by the stopping-time combinator.

use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::regression::{fit_polynomial, RegressionFit};

/// `E[target | F_step]` for a set of paths that share the conditioning step.
///
/// The listed paths always form an `F_step`-measurable set, so an estimator
/// may pool them by their information at `step`.
pub trait ConditionalExpectation: Sync {
    fn conditional_mean(&self, step: usize, paths: &[usize], target: &[f64]) -> Result<Vec<f64>>;
}

/// Exact conditional expectation on an enumerated tree: paths with the same
/// atom id at `step` carry the same information, and the estimate is their
/// probability-weighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeEstimator {
    points: usize,
    /// `[path][point]` atom ids.
    atoms: Vec<u64>,
    weights: Vec<f64>,
}

impl TreeEstimator {
    pub fn new(points: usize, atoms: Vec<u64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.len() != weights.len() * points {
            return Err(Error::Estimator("atom table does not match path count".into()));
        }
        Ok(Self { points, atoms, weights })
    }
}

impl ConditionalExpectation for TreeEstimator {
    fn conditional_mean(&self, step: usize, paths: &[usize], target: &[f64]) -> Result<Vec<f64>> {
        let mut groups: Vec<(u64, f64, f64)> = Vec::new();
        let mut slot = Vec::with_capacity(paths.len());
        for (&p, &y) in paths.iter().zip(target) {
            let atom = self.atoms[p * self.points + step];
            let w = self.weights[p];
            let i = match groups.iter().position(|g| g.0 == atom) {
                Some(i) => i,
                None => {
                    groups.push((atom, 0.0, 0.0));
                    groups.len() - 1
                }
            };
            groups[i].1 += w * y;
            groups[i].2 += w;
            slot.push(i);
        }
        slot.into_iter()
            .map(|i| {
                let (_, num, den) = groups[i];
                if den > 0.0 {
                    Ok(num / den)
                } else {
                    Err(Error::Estimator(format!("atom {} has zero probability", groups[i].0)))
                }
            })
            .collect()
    }
}

/// Cross-sectional polynomial regression on the state at the conditioning
/// step. Targets are divided by the deflator at that step before the fit and
/// multiplied back afterwards, which leaves the conditional expectation
/// unchanged and makes the regressand a function of the state in Markov
/// markets.
#[derive(Debug)]
pub struct RegressionEstimator {
    points: usize,
    width: usize,
    /// `[path][point][var]`.
    states: Vec<f64>,
    /// `[path][point]`.
    deflator: Vec<f64>,
    degree: usize,
    fits: Mutex<Vec<Option<RegressionFit>>>,
}

impl RegressionEstimator {
    pub fn new(points: usize, width: usize, states: Vec<f64>, deflator: Vec<f64>, degree: usize) -> Result<Self> {
        if states.len() != deflator.len() * width || !deflator.len().is_multiple_of(points) {
            return Err(Error::Estimator("state table does not match deflator table".into()));
        }
        Ok(Self {
            points,
            width,
            states,
            deflator,
            degree,
            fits: Mutex::new(vec![None; points]),
        })
    }

    /// Most recent fit made at each step.
    pub fn fits(&self) -> Vec<Option<RegressionFit>> {
        self.fits.lock().expect("fit table poisoned").clone()
    }

    fn state(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * self.points + step) * self.width;
        &self.states[start..start + self.width]
    }
}

impl ConditionalExpectation for RegressionEstimator {
    fn conditional_mean(&self, step: usize, paths: &[usize], target: &[f64]) -> Result<Vec<f64>> {
        let mut rows = Vec::with_capacity(paths.len() * self.width);
        let mut y = Vec::with_capacity(paths.len());
        for (&p, &t) in paths.iter().zip(target) {
            rows.extend_from_slice(self.state(p, step));
            y.push(t / self.deflator[p * self.points + step]);
        }
        let fit = fit_polynomial(&rows, self.width, &y, self.degree)?;
        let out = paths
            .iter()
            .map(|&p| fit.predict(self.state(p, step)) * self.deflator[p * self.points + step])
            .collect();
        self.fits.lock().expect("fit table poisoned")[step] = Some(fit);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tree_estimator_pools_atoms() {
        // two steps, four paths; at step 1 atoms split {0,1} and {2,3}
        let atoms = vec![0, 0, 1, 0, 0, 1, 0, 1, 2, 0, 1, 2];
        let est = TreeEstimator::new(3, atoms, vec![0.25; 4]).unwrap();
        let m = est.conditional_mean(1, &[0, 1, 2, 3], &[1.0, 3.0, 4.0, 8.0]).unwrap();
        assert_eq!(m, vec![2.0, 2.0, 6.0, 6.0]);
        let m0 = est.conditional_mean(0, &[0, 1, 2, 3], &[1.0, 3.0, 4.0, 8.0]).unwrap();
        assert_eq!(m0, vec![4.0; 4]);
    }

    #[test]
    fn regression_estimator_scales_by_deflator() {
        let states = vec![1.0, 2.0, 3.0, 4.0];
        let defl = vec![2.0; 4];
        let est = RegressionEstimator::new(1, 1, states, defl, 1).unwrap();
        let m = est.conditional_mean(0, &[0, 1, 2, 3], &[2.0, 4.0, 6.0, 8.0]).unwrap();
        for (a, b) in m.iter().zip([2.0, 4.0, 6.0, 8.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(est.fits()[0].is_some());
    }
}
