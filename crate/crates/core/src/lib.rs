//! Federated learning simulator for client-level demographic parity.
//!
//! Modules, bottom up: [`numerics`] (vector kernels, seeded streams, normal
//! CDF), [`data`] (samples, ingestion, partitioning), [`model`] (linear and
//! MLP classifiers), [`fairness`] (DDP, NPR, smoothed penalty), [`fedengine`]
//! (local, FedAvg, pFedMe and pFedFair training), [`oracle`] (brute-force
//! checks on discrete distributions) and [`report`] (configs, sweeps, CSV).

pub mod data;
pub mod error;
pub mod fairness;
pub mod fedengine;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod report;

pub use error::{Error, Result};
