//! State-arbitrage detection from the kernel residual and the explicit
//! arbitrage portfolio when the market fails the test.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deflator::DeflatorSet;
use crate::error::{invalid, Result};
use crate::portfolio::{wealth_paths, IncomeStream, PortfolioProcess};
use crate::sde::ScenarioSet;

const MAX_OFFENDING: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArbitrageReport {
    pub is_state_arbitrage_free: bool,
    /// Max of `|p|` over every sampled `(path, step)`.
    pub max_residual_norm: f64,
    pub tolerance: f64,
    pub n_offending: usize,
    /// First offending `(path, step)` pairs in path order, at most 100.
    pub offending: Vec<(usize, usize)>,
}

/// The market is state-arbitrage-free on the sample iff `|p| <= tol` at
/// every path and grid point.
pub fn detect_state_arbitrage(scenarios: &ScenarioSet, deflators: &DeflatorSet, tol: f64) -> Result<ArbitrageReport> {
    if !(tol > 0.0) {
        return invalid("detection tolerance must be positive");
    }
    if deflators.n_paths() != scenarios.n_paths() || deflators.n_points() != scenarios.n_points() {
        return invalid("deflators and scenarios disagree in shape");
    }
    let mut max_residual_norm: f64 = 0.0;
    let mut n_offending = 0;
    let mut offending = Vec::new();
    for p in 0..deflators.n_paths() {
        for k in 0..deflators.n_points() {
            let norm = deflators.residual_norm(p, k);
            max_residual_norm = max_residual_norm.max(norm);
            if !(norm <= tol) {
                n_offending += 1;
                if offending.len() < MAX_OFFENDING {
                    offending.push((p, k));
                }
            }
        }
    }
    Ok(ArbitrageReport {
        is_state_arbitrage_free: n_offending == 0,
        max_residual_norm,
        tolerance: tol,
        n_offending,
        offending,
    })
}

/// `pi = p / |p|` wherever `|p| > tol`, zero elsewhere. The bond holds the
/// rest, starting from zero capital.
pub fn construct_arbitrage_portfolio(
    scenarios: &ScenarioSet,
    deflators: &DeflatorSet,
    tol: f64,
) -> Result<PortfolioProcess> {
    if deflators.n_paths() != scenarios.n_paths() || deflators.n_points() != scenarios.n_points() {
        return invalid("deflators and scenarios disagree in shape");
    }
    let (n_paths, points, n) = (scenarios.n_paths(), scenarios.n_points(), scenarios.n_assets());
    let mut pf = PortfolioProcess::zeros(n_paths, points, n);
    for p in 0..n_paths {
        for k in 0..points {
            let norm = deflators.residual_norm(p, k);
            if norm > tol {
                let residual = deflators.residual(p, k);
                for (a, r) in pf.amounts_mut(p, k).iter_mut().zip(residual) {
                    *a = r / norm;
                }
            }
        }
    }
    Ok(pf)
}

/// Gain paths `G[path][point]` of a self-financed portfolio started from zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GainPaths {
    n_paths: usize,
    points: usize,
    gain: Vec<f64>,
}

impl GainPaths {
    #[inline]
    pub fn gain(&self, path: usize, step: usize) -> f64 {
        self.gain[path * self.points + step]
    }

    pub fn gain_path(&self, path: usize) -> &[f64] {
        &self.gain[path * self.points..(path + 1) * self.points]
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_points(&self) -> usize {
        self.points
    }

    /// `H_0 G` at every point, path-major.
    pub fn deflated(&self, deflators: &DeflatorSet) -> Vec<f64> {
        self.gain
            .par_iter()
            .enumerate()
            .map(|(i, g)| deflators.h(i / self.points, i % self.points) * g)
            .collect()
    }

    /// `H_0(T) G(T)` per path.
    pub fn deflated_terminal(&self, deflators: &DeflatorSet) -> Vec<f64> {
        let last = self.points - 1;
        (0..self.n_paths)
            .map(|p| deflators.h(p, last) * self.gain(p, last))
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["path", "step", "gain"])?;
        for p in 0..self.n_paths {
            for k in 0..self.points {
                w.write_record(&[p.to_string(), k.to_string(), self.gain(p, k).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// `gamma G = int gamma pi^T (sigma dW + (b + delta - r 1) dt)` at left
/// endpoints; identical to wealth accounting with zero capital and no income.
pub fn simulate_gain(portfolio: &PortfolioProcess, scenarios: &ScenarioSet) -> Result<GainPaths> {
    let w = wealth_paths(0.0, portfolio, &IncomeStream::none(), scenarios)?;
    let gain = (0..w.n_paths()).flat_map(|p| w.wealth_path(p).to_vec()).collect();
    Ok(GainPaths {
        n_paths: w.n_paths(),
        points: w.n_points(),
        gain,
    })
}
