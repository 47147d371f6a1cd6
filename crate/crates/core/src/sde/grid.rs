use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Ordered simulation dates `0 = t_0 < t_1 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Uniform grid with `t_k = k * horizon / n_steps`.
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return invalid(format!("horizon must be positive and finite, got {horizon}"));
        }
        if n_steps == 0 {
            return invalid("grid needs at least one step");
        }
        let mut times: Vec<f64> = (0..=n_steps).map(|k| k as f64 * horizon / n_steps as f64).collect();
        times[n_steps] = horizon;
        Ok(Self { times })
    }

    /// Arbitrary strictly increasing grid starting at zero.
    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return invalid("grid needs at least one step");
        }
        if times[0] != 0.0 {
            return invalid("grid must start at t = 0");
        }
        if times.iter().any(|t| !t.is_finite()) {
            return invalid("grid times must be finite");
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return invalid("grid times must be strictly increasing");
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Number of stored points, `n_steps + 1`.
    pub fn n_points(&self) -> usize {
        self.times.len()
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        self.times[k]
    }

    /// Length of step `k`, i.e. `t_{k+1} - t_k`.
    #[inline]
    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    /// Index of the last grid point not later than `t`.
    pub fn index_at_or_before(&self, t: f64) -> usize {
        self.times.iter().rposition(|&s| s <= t).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_grid() {
        let g = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(g.times(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(g.n_steps(), 4);
    }

    #[test]
    fn minimal_grid() {
        let g = TimeGrid::uniform(1.0, 1).unwrap();
        assert_eq!(g.times(), &[0.0, 1.0]);
    }

    #[test]
    fn uniform_spacing() {
        let g = TimeGrid::uniform(2.0, 8).unwrap();
        for k in 0..8 {
            assert_eq!(g.dt(k), 0.25);
        }
        assert_eq!(g.horizon(), 2.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TimeGrid::uniform(0.0, 4).is_err());
        assert!(TimeGrid::uniform(-1.0, 4).is_err());
        assert!(TimeGrid::uniform(1.0, 0).is_err());
        assert!(TimeGrid::uniform(f64::NAN, 3).is_err());
        assert!(TimeGrid::from_times(vec![0.0, 0.5, 0.5]).is_err());
        assert!(TimeGrid::from_times(vec![0.1, 0.5]).is_err());
    }

    #[test]
    fn non_uniform_grid() {
        let g = TimeGrid::from_times(vec![0.0, 0.1, 0.5, 1.0]).unwrap();
        assert_eq!(g.n_steps(), 3);
        assert!((g.dt(1) - 0.4).abs() < 1e-15);
        assert_eq!(g.index_at_or_before(0.7), 2);
    }
}
