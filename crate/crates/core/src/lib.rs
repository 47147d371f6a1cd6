//! Scenario-based valuation of claims in Itô-process markets using state-price
//! deflators, with state-arbitrage detection and optimal-stopping tools.

pub mod american;
pub mod arbitrage;
pub mod claims;
pub mod deflator;
pub mod error;
pub mod european;
pub mod portfolio;
pub mod regression;
pub mod sde;
pub mod stats;

pub use error::{Error, Result};
