//! Block-matching flow models.
//!
//! Flow matching between a learned label-conditioned Gaussian mixture and the data,
//! with four prior regularizers, ODE samplers, and curvature diagnostics.

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod ndnum;
pub mod prior;
pub mod regularizers;
pub mod solvers;
pub mod velocity;

pub use error::{Error, Result};
