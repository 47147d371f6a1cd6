//! Sample statistics shared by the Monte Carlo estimators.

use serde::{Deserialize, Serialize};

/// z-quantile used for the reported 95% confidence intervals.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n: usize,
    pub conf_interval: (f64, f64),
}

impl Estimate {
    /// Equal-weight sample mean. Summation is sequential so the result does
    /// not depend on how the samples were produced.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self {
                estimate: f64::NAN,
                std_error: f64::NAN,
                n,
                conf_interval: (f64::NAN, f64::NAN),
            };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let ss: f64 = samples.iter().map(|x| (x - mean) * (x - mean)).sum();
            (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
        } else {
            0.0
        };
        Self {
            estimate: mean,
            std_error,
            n,
            conf_interval: (mean - Z_95 * std_error, mean + Z_95 * std_error),
        }
    }

    /// Probability-weighted mean. The standard error is zero because the
    /// weights describe an exact distribution, not a sample.
    pub fn exact(values: &[f64], weights: &[f64]) -> Self {
        let estimate = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>();
        Self {
            estimate,
            std_error: 0.0,
            n: values.len(),
            conf_interval: (estimate, estimate),
        }
    }

    /// Number of standard errors separating the estimate from `target`.
    pub fn z_score(&self, target: f64) -> f64 {
        if self.std_error == 0.0 {
            if self.estimate == target {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.estimate - target) / self.std_error
        }
    }
}

/// Linear-interpolated empirical quantile of an unsorted sample.
pub fn quantile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_sample_has_zero_error() {
        let e = Estimate::from_samples(&[1.0; 10]);
        assert_eq!(e.estimate, 1.0);
        assert_eq!(e.std_error, 0.0);
        assert_eq!(e.conf_interval, (1.0, 1.0));
    }

    #[test]
    fn standard_error_of_two_points() {
        let e = Estimate::from_samples(&[0.0, 2.0]);
        assert_eq!(e.estimate, 1.0);
        // sd = sqrt(2), se = sd / sqrt(2) = 1
        assert!((e.std_error - 1.0).abs() < 1e-15);
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 4.0);
        assert_eq!(quantile(&xs, 0.5), 2.5);
    }
}
