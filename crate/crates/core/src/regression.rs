//! Cross-sectional least squares on polynomial bases in a standardized state.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Singular values of the Gram matrix below this fraction of the largest are
/// treated as rank loss.
const GRAM_RANK_TOL: f64 = 1e-13;

/// Total-degree monomial exponents over `n_vars` variables, constant first.
fn monomials(n_vars: usize, degree: usize) -> Vec<Vec<u32>> {
    fn rec(var: usize, left: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if var == cur.len() {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur[var] = e as u32;
            rec(var + 1, left - e, cur, out);
        }
        cur[var] = 0;
    }
    let mut out = Vec::new();
    let mut cur = vec![0u32; n_vars];
    rec(0, degree, &mut cur, &mut out);
    out.sort_by_key(|e| e.iter().sum::<u32>());
    out
}

/// A fitted conditional-expectation surface `E[y | x] ~ sum_j beta_j m_j(z)`,
/// with `z` the standardized state.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Variables that varied across the sample; constant ones are dropped.
    active: Vec<usize>,
    exponents: Vec<Vec<u32>>,
    coefs: Vec<f64>,
    degree: usize,
    lo: f64,
    hi: f64,
}

impl RegressionFit {
    /// Degree actually used after any fallback.
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_terms(&self) -> usize {
        self.coefs.len()
    }

    fn basis(&self, state: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for e in &self.exponents {
            let mut v = 1.0;
            for (slot, &var) in self.active.iter().enumerate() {
                let z = (state[var] - self.mean[slot]) / self.scale[slot];
                v *= z.powi(e[slot] as i32);
            }
            out.push(v);
        }
    }

    /// Fitted value, clamped to the range of the regressand seen in the fit.
    pub fn predict(&self, state: &[f64]) -> f64 {
        self.predict_raw(state).clamp(self.lo, self.hi)
    }

    /// Fitted value without clamping; keeps the in-sample residuals
    /// orthogonal to the basis.
    pub fn predict_raw(&self, state: &[f64]) -> f64 {
        let mut b = Vec::with_capacity(self.coefs.len());
        self.basis(state, &mut b);
        b.iter().zip(&self.coefs).map(|(x, c)| x * c).sum()
    }
}

/// Fits `y` on a total-degree polynomial basis of the rows of `states`
/// (`m x n_vars`, row-major). When the normal equations are rank deficient
/// the degree is lowered until they are not.
pub fn fit_polynomial(states: &[f64], n_vars: usize, y: &[f64], degree: usize) -> Result<RegressionFit> {
    let m = y.len();
    if m == 0 {
        return Err(Error::Estimator("empty regression sample".into()));
    }
    if states.len() != m * n_vars {
        return Err(Error::Estimator(format!(
            "state matrix has {} entries, expected {}",
            states.len(),
            m * n_vars
        )));
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Estimator(format!("non-finite regressand at sample {i}")));
    }
    let lo = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

    let mut mean = Vec::new();
    let mut scale = Vec::new();
    let mut active = Vec::new();
    for v in 0..n_vars {
        let mu = (0..m).map(|r| states[r * n_vars + v]).sum::<f64>() / m as f64;
        let var = (0..m).map(|r| (states[r * n_vars + v] - mu).powi(2)).sum::<f64>() / m as f64;
        let sd = var.sqrt();
        if sd > 1e-12 * (1.0 + mu.abs()) {
            mean.push(mu);
            scale.push(sd);
            active.push(v);
        }
    }

    let mut deg = if active.is_empty() { 0 } else { degree };
    loop {
        let exponents = monomials(active.len(), deg);
        let q = exponents.len();
        let mut fit = RegressionFit {
            mean: mean.clone(),
            scale: scale.clone(),
            active: active.clone(),
            exponents,
            coefs: vec![0.0; q],
            degree: deg,
            lo,
            hi,
        };
        if q <= m {
            let mut gram = DMatrix::<f64>::zeros(q, q);
            let mut rhs = DVector::<f64>::zeros(q);
            let mut b = Vec::with_capacity(q);
            for r in 0..m {
                fit.basis(&states[r * n_vars..(r + 1) * n_vars], &mut b);
                for i in 0..q {
                    rhs[i] += b[i] * y[r];
                    for j in 0..=i {
                        gram[(i, j)] += b[i] * b[j];
                    }
                }
            }
            for i in 0..q {
                for j in 0..i {
                    gram[(j, i)] = gram[(i, j)];
                }
            }
            let svd = gram.svd(true, true);
            let smax = svd.singular_values.max();
            let smin = svd.singular_values.min();
            if smax > 0.0 && smin > GRAM_RANK_TOL * smax {
                let beta = svd.solve(&rhs, 0.0).map_err(|e| Error::Estimator(e.to_string()))?;
                fit.coefs = beta.iter().cloned().collect();
                return Ok(fit);
            }
        }
        if deg == 0 {
            break;
        }
        log::warn!("regression basis of degree {deg} is rank deficient on {m} samples; lowering degree");
        deg -= 1;
    }
    // Degree zero with a rank-deficient Gram matrix only happens for m = 0,
    // which was rejected above.
    Err(Error::Estimator("regression failed at every degree".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_counts() {
        assert_eq!(monomials(1, 4).len(), 5);
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(3, 0), vec![vec![0, 0, 0]]);
        assert_eq!(monomials(0, 3), vec![Vec::<u32>::new()]);
    }

    #[test]
    fn recovers_exact_polynomial() {
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let y: Vec<f64> = xs.iter().map(|x| 1.0 - 2.0 * x + 0.5 * x * x).collect();
        let fit = fit_polynomial(&xs, 1, &y, 2).unwrap();
        for x in [0.3, 1.7, 4.2] {
            assert!((fit.predict(&[x]) - (1.0 - 2.0 * x + 0.5 * x * x)).abs() < 1e-10);
        }
    }

    #[test]
    fn two_variables() {
        let mut states = Vec::new();
        let mut y = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                let (a, b) = (i as f64, j as f64 * 0.3);
                states.extend([a, b]);
                y.push(a * b + 3.0);
            }
        }
        let fit = fit_polynomial(&states, 2, &y, 2).unwrap();
        assert!((fit.predict(&[4.0, 1.2]) - 7.8).abs() < 1e-10);
    }

    #[test]
    fn constant_state_falls_back_to_mean() {
        let states = vec![2.0; 4];
        let y = vec![1.0, 2.0, 3.0, 6.0];
        let fit = fit_polynomial(&states, 1, &y, 4).unwrap();
        assert_eq!(fit.degree(), 0);
        assert!((fit.predict(&[2.0]) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn too_few_distinct_points_lowers_degree() {
        let states = vec![0.0, 1.0, 0.0, 1.0];
        let y = vec![1.0, 3.0, 1.0, 3.0];
        let fit = fit_polynomial(&states, 1, &y, 3).unwrap();
        assert_eq!(fit.degree(), 1);
        assert!((fit.predict(&[0.5]) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn predictions_are_clamped() {
        let xs = vec![0.0, 1.0, 2.0];
        let y = vec![0.0, 1.0, 2.0];
        let fit = fit_polynomial(&xs, 1, &y, 1).unwrap();
        assert_eq!(fit.predict(&[10.0]), 2.0);
        assert_eq!(fit.predict(&[-10.0]), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_polynomial(&[], 1, &[], 2).is_err());
        assert!(fit_polynomial(&[1.0], 1, &[f64::NAN], 2).is_err());
        assert!(fit_polynomial(&[1.0, 2.0], 1, &[1.0], 2).is_err());
    }
}
