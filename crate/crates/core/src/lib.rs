//! Equilibrium solver for an energy-transfer economy.
//!
//! An agent turns prime-mover services into goods, spends energy income on
//! final goods and accumulates prime movers. The crate computes the autarkic
//! equilibrium with its marginal energy transfers and scarcity costs, trade
//! between solved agents, and the money price layer built on top.

pub mod allocation;
pub mod energy_sector;
pub mod equilibrium;
pub mod error;
pub mod exchange;
pub mod io;
pub mod model;
pub mod money;
pub mod numerics;
pub mod producer;
pub mod runner;
pub mod scenarios;

pub use error::{EconError, Result};
