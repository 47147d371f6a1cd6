//! Reproducible Brownian increments.
//!
//! Every `(path, driver)` pair owns an independent ChaCha8 stream keyed by the
//! batch seed, consumed sequentially over steps. The increment at
//! `(path, step, driver)` is therefore the same whether the path is simulated
//! alone, inside a batch, with more drivers, or on any number of threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grid::TimeGrid;
use crate::error::{invalid, Result};

/// Drivers per path addressable by the stream layout.
pub const MAX_DRIVERS: usize = 1 << 16;
const MAX_PATHS: usize = 1 << 47;

/// Gaussian increments `dW[path][step][driver] ~ N(0, dt_step)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrownianBatch {
    d: usize,
    n_paths: usize,
    n_steps: usize,
    seed: u64,
    increments: Vec<f64>,
}

impl BrownianBatch {
    pub fn n_drivers(&self) -> usize {
        self.d
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// All increments of one path, laid out `[step][driver]`.
    pub fn path(&self, path: usize) -> &[f64] {
        let stride = self.n_steps * self.d;
        &self.increments[path * stride..(path + 1) * stride]
    }

    /// Increments `dW(t_step)` for all drivers.
    pub fn step(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * self.n_steps + step) * self.d;
        &self.increments[start..start + self.d]
    }

    pub fn increment(&self, path: usize, step: usize, driver: usize) -> f64 {
        self.increments[(path * self.n_steps + step) * self.d + driver]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.increments
    }
}

fn stream_id(path: usize, driver: usize) -> u64 {
    ((path as u64) << 16) | driver as u64
}

/// Writes the increments of a single path into `out` (`[step][driver]`).
pub fn fill_path_increments(grid: &TimeGrid, d: usize, seed: u64, path: usize, out: &mut [f64]) {
    let n_steps = grid.n_steps();
    debug_assert_eq!(out.len(), n_steps * d);
    for driver in 0..d {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id(path, driver));
        for step in 0..n_steps {
            let z: f64 = StandardNormal.sample(&mut rng);
            out[step * d + driver] = z * grid.dt(step).sqrt();
        }
    }
}

pub(crate) fn check_dimensions(d: usize, n_paths: usize) -> Result<()> {
    if d == 0 {
        return invalid("need at least one Brownian driver");
    }
    if d > MAX_DRIVERS {
        return invalid(format!("at most {MAX_DRIVERS} drivers are supported"));
    }
    if n_paths == 0 {
        return invalid("need at least one path");
    }
    if n_paths > MAX_PATHS {
        return invalid("too many paths for the stream layout");
    }
    Ok(())
}

/// Draws a batch of `n_paths` independent `d`-dimensional Brownian paths.
pub fn simulate_brownian(grid: &TimeGrid, d: usize, n_paths: usize, seed: u64) -> Result<BrownianBatch> {
    check_dimensions(d, n_paths)?;
    let n_steps = grid.n_steps();
    let stride = n_steps * d;
    let mut increments = vec![0.0; n_paths * stride];
    increments
        .par_chunks_mut(stride)
        .enumerate()
        .for_each(|(path, out)| fill_path_increments(grid, d, seed, path, out));
    Ok(BrownianBatch {
        d,
        n_paths,
        n_steps,
        seed,
        increments,
    })
}
