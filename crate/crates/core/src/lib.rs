//! Deformation Jacobian learning and adaptive shape control for elastic
//! deformable linear objects (DLOs), with a quasi-static rod simulator that
//! provides ground truth.

pub mod adapt;
pub mod baselines;
pub mod banded;
pub mod controller;
pub mod datasets;
pub mod episode;
pub mod evaluate;
pub mod error;
pub mod kmeans;
pub mod metrics;
pub mod oracle;
pub mod plant;
pub mod rbfn;
pub mod rod;
pub mod state;
pub mod train;

pub use error::{Error, Result};
