//! Payoff allocation for an aggregator of renewable power producers that
//! sells in a two-settlement (day-ahead / real-time) electricity market.
//!
//! The allocation pays every producer its day-ahead revenue plus its own
//! deviation valued at one marginal price, which keeps the payoff vector in
//! the core of the pooling game for every realization of generation. The
//! crate also ships the audit checks, the market-equilibrium derivation of
//! the same allocation, news-vendor contract sizing and an hourly simulator.

pub mod allocation;
pub mod contracts;
pub mod equilibrium;
pub mod error;
pub mod market;
pub mod simulator;

pub use allocation::{allocate, PamConfig, PayoffAllocation, PropertyReport};
pub use error::{Error, Result};
pub use market::{PriceTriple, ScenarioSnapshot};
