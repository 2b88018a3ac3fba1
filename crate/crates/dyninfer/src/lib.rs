//! Budgeted early-exit video classification: training, calibration,
//! evaluation and budget sweeps over a progressive checkpoint lattice.

pub mod config;
pub mod error;
pub mod formats;
pub mod harness;
pub mod network;
pub mod report;
pub mod train;

pub use error::{Error, Result};
pub use network::Network;
