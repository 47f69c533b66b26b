//! Marginalization-consistent probabilistic circuits for irregular
//! multivariate time series.

pub mod bifurcation;
pub mod checkpoint;
pub mod circuit;
pub mod consistency;
pub mod data;
pub mod density;
pub mod encoder;
mod error;
pub mod leaf;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod quadrature;
pub mod train;

pub use error::{CoreError, Result};
