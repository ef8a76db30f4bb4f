pub mod baselines;
pub mod commands;
pub mod bridge;
pub mod error;
pub mod io;
pub mod metrics;
pub mod moe;
pub mod net;
pub mod params;
pub mod pipeline;
pub mod raster;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
