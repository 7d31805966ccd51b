pub mod cli;
pub mod d_cache;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optical_flow;
pub mod rng;
pub mod schedule;
pub mod smpi;
pub mod tensor;
pub mod train;
pub mod vfr_sd;

pub use error::{Error, Result};
