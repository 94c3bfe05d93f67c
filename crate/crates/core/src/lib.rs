//! Gap filling for space-time raster sequences with cloud-like missing data.

pub mod autodiff;
pub mod benchmark;
pub mod dineof;
pub mod direct_net;
pub mod error;
pub mod field;
pub mod gfd;
pub mod metrics;
pub mod model;
pub mod obs_sim;
pub mod tiling;
pub mod training;
pub mod var_solver;

pub use error::{Error, Result};
pub use field::{GappyField, NormStats, Transform};
