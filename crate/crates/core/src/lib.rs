//! Estimation of the background temperature of text-generation systems:
//! the sampling temperature that the variability of a system run at nominal
//! temperature 0 is equivalent to.

pub mod backend;
pub mod campaign;
pub mod error;
pub mod estimate;
pub mod lab;
pub mod metrics;
pub mod report;
pub mod sampling;
pub mod simulate;
pub mod store;

pub use error::{Error, Result};
