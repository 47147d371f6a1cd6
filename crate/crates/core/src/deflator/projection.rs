//! Market price of risk by orthogonal projection.
//!
//! `theta` is the minimal-norm least-squares solution of `sigma x = excess`,
//! so it lies in the orthogonal complement of `ker(sigma)`; the residual
//! `p = excess - sigma theta` is the component of the excess return outside
//! `range(sigma)`.

use nalgebra::DMatrix;

use crate::error::{invalid, Result};

/// Default relative threshold below which singular values count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Projection of one excess-return vector onto `range(sigma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSlice {
    pub theta: Vec<f64>,
    pub residual: Vec<f64>,
    pub rank: usize,
    /// Smallest singular value kept in the pseudoinverse, `0.0` at rank zero.
    pub smallest_singular_value: f64,
}

impl ProjectionSlice {
    pub fn residual_norm(&self) -> f64 {
        self.residual.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Moore-Penrose pseudoinverse of an `n x d` matrix with a relative rank
/// cut-off, stored `d x n` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    n: usize,
    d: usize,
    pinv: Vec<f64>,
    rank: usize,
    smallest: f64,
}

impl Projector {
    /// `vol` is `n x d` row-major.
    pub fn new(vol: &[f64], n: usize, d: usize, rank_tol: f64) -> Result<Self> {
        let mut p = Self {
            n,
            d,
            pinv: vec![0.0; n * d],
            rank: 0,
            smallest: 0.0,
        };
        p.rebuild(vol, rank_tol)?;
        Ok(p)
    }

    /// Recomputes the pseudoinverse for a new matrix of the same shape,
    /// reusing the storage.
    pub fn rebuild(&mut self, vol: &[f64], rank_tol: f64) -> Result<()> {
        let (n, d) = (self.n, self.d);
        if vol.len() != n * d {
            return invalid(format!("matrix has {} entries, expected {n}x{d}", vol.len()));
        }
        if !(rank_tol > 0.0) {
            return invalid("rank tolerance must be positive");
        }
        if vol.iter().any(|x| !x.is_finite()) {
            return invalid("volatility matrix has non-finite entries");
        }
        self.pinv.iter_mut().for_each(|x| *x = 0.0);
        self.rank = 0;
        self.smallest = 0.0;
        if n == 1 || d == 1 {
            // A single row or column has one singular value, its norm.
            let norm_sq: f64 = vol.iter().map(|x| x * x).sum();
            if norm_sq == 0.0 {
                return Ok(());
            }
            for i in 0..n {
                for j in 0..d {
                    self.pinv[j * n + i] = vol[i * d + j] / norm_sq;
                }
            }
            self.rank = 1;
            self.smallest = norm_sq.sqrt();
            return Ok(());
        }

        let m = DMatrix::from_row_slice(n, d, vol);
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u.as_ref(), svd.v_t.as_ref()) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return invalid("singular value decomposition failed"),
        };
        let s_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let cutoff = rank_tol * s_max;
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s <= cutoff || s == 0.0 {
                continue;
            }
            self.rank += 1;
            self.smallest = if self.rank == 1 { s } else { f64::min(self.smallest, s) };
            for j in 0..d {
                let vj = v_t[(k, j)] / s;
                for i in 0..n {
                    self.pinv[j * n + i] += vj * u[(i, k)];
                }
            }
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn smallest_singular_value(&self) -> f64 {
        self.smallest
    }

    /// Writes `theta = pinv * excess` and `p = excess - sigma * theta`.
    #[inline]
    pub fn apply(&self, vol: &[f64], excess: &[f64], theta: &mut [f64], residual: &mut [f64]) {
        let (n, d) = (self.n, self.d);
        for j in 0..d {
            let row = &self.pinv[j * n..(j + 1) * n];
            theta[j] = row.iter().zip(excess).map(|(a, b)| a * b).sum();
        }
        for i in 0..n {
            let fitted: f64 = vol[i * d..(i + 1) * d]
                .iter()
                .zip(theta.iter())
                .map(|(a, b)| a * b)
                .sum();
            residual[i] = excess[i] - fitted;
        }
    }
}

/// Market price of risk and kernel residual for one volatility slice.
pub fn market_price_of_risk(sigma: &DMatrix<f64>, excess: &[f64], rank_tol: f64) -> Result<ProjectionSlice> {
    let (n, d) = sigma.shape();
    if excess.len() != n {
        return invalid(format!("excess has {} entries, expected {n}", excess.len()));
    }
    if excess.iter().any(|x| !x.is_finite()) {
        return invalid("excess return has non-finite entries");
    }
    let vol: Vec<f64> = (0..n).flat_map(|i| (0..d).map(move |j| sigma[(i, j)])).collect();
    let projector = Projector::new(&vol, n, d, rank_tol)?;
    let mut theta = vec![0.0; d];
    let mut residual = vec![0.0; n];
    projector.apply(&vol, excess, &mut theta, &mut residual);
    Ok(ProjectionSlice {
        theta,
        residual,
        rank: projector.rank,
        smallest_singular_value: projector.smallest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_volatility() {
        let s = market_price_of_risk(&DMatrix::identity(2, 2), &[0.03, 0.07], DEFAULT_RANK_TOL).unwrap();
        assert!(close(&s.theta, &[0.03, 0.07], 1e-15));
        assert!(close(&s.residual, &[0.0, 0.0], 1e-15));
        assert_eq!(s.rank, 2);
    }

    #[test]
    fn single_row_extra_driver_gets_zero_weight() {
        let sigma = DMatrix::from_row_slice(1, 2, &[0.2, 0.0]);
        let s = market_price_of_risk(&sigma, &[0.05], DEFAULT_RANK_TOL).unwrap();
        assert!(close(&s.theta, &[0.25, 0.0], 1e-15));
        assert!(s.residual[0].abs() < 1e-16);
    }

    #[test]
    fn equal_columns_leave_a_residual() {
        let sigma = DMatrix::from_row_slice(2, 1, &[0.2, 0.2]);
        let s = market_price_of_risk(&sigma, &[0.05, 0.09], DEFAULT_RANK_TOL).unwrap();
        assert!(close(&s.theta, &[0.35], 1e-14));
        assert!(close(&s.residual, &[-0.02, 0.02], 1e-15));
        // p is orthogonal to the single column
        assert!((0.2 * s.residual[0] + 0.2 * s.residual[1]).abs() < 1e-16);
    }

    #[test]
    fn svd_route_matches_rank_one_shortcut() {
        // 2x2 rank-one matrix goes through the SVD; compare with the
        // shortcut on its single column.
        let sigma = DMatrix::from_row_slice(2, 2, &[0.2, 0.0, 0.2, 0.0]);
        let full = market_price_of_risk(&sigma, &[0.05, 0.09], DEFAULT_RANK_TOL).unwrap();
        assert_eq!(full.rank, 1);
        assert!(close(&full.theta, &[0.35, 0.0], 1e-14));
        assert!(close(&full.residual, &[-0.02, 0.02], 1e-14));
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let sigma = DMatrix::zeros(2, 3);
        let s = market_price_of_risk(&sigma, &[0.01, -0.02], DEFAULT_RANK_TOL).unwrap();
        assert_eq!(s.rank, 0);
        assert_eq!(s.theta, vec![0.0; 3]);
        assert_eq!(s.residual, vec![0.01, -0.02]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let sigma = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert!(market_price_of_risk(&sigma, &[0.0], DEFAULT_RANK_TOL).is_err());
        let sigma = DMatrix::from_row_slice(1, 1, &[0.2]);
        assert!(market_price_of_risk(&sigma, &[f64::INFINITY], DEFAULT_RANK_TOL).is_err());
    }
}
