//! Multi-view geospatial representation pretraining and prompt-empowered
//! ride-hailing forecasting on synthetic cities.

pub mod checkpoint;
pub mod embedlib;
mod error;
pub mod eval;
pub mod forecast;
pub mod fusion;
pub mod mobility;
pub mod nn;
pub mod poi;
pub mod synth;
pub mod uplift;

pub use error::{Error, Result};
