//! Low-rank neighborhood embedding for spectral mixtures.

pub mod admm;
pub mod affinity;
pub mod cluster;
pub mod dataset;
pub mod embed;
pub mod error;
pub mod eval;
pub mod hapke;
pub mod linalg;
pub mod neighborhood;
pub mod pipeline;
pub mod sparse;
pub mod theory;

pub use error::{Error, Result};
