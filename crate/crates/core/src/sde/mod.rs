//! Time grid, Brownian drivers and the simulated market.

mod brownian;
mod grid;
mod market;
mod scenario;

pub use brownian::{fill_path_increments, simulate_brownian, BrownianBatch, MAX_DRIVERS};
pub use grid::TimeGrid;
pub use market::{
    AuxProcess, BesselDeflatorDemo, CoefficientModel, CoefficientValues, ConstantCoefficients, MarketModel,
    PiecewiseConstant, Scheme, DEFAULT_INTEGRAL_CAP,
};
pub use scenario::{simulate_market, simulate_path, simulate_scenarios, PathBuffers, ScenarioSet};
