pub mod agg;
pub mod checks;
pub mod data;
pub mod error;
pub mod graph;
pub mod idproof;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
