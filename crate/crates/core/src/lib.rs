//! Multi-realism learned image codec.
//!
//! One encoder, entropy model and generator serve a continuum of
//! rate/distortion/realism trade-offs: the realism weight β is picked by
//! the receiver at decode time and only changes the generator.

pub mod conditioning;
pub mod config;
pub mod data;
pub mod entropy;
pub mod error;
pub mod nn;
pub mod range_coder;
pub mod transforms;
pub mod losses;
pub mod perceptual;
pub mod model;
pub mod checkpoint;
pub mod trainer;
pub mod metrics;
pub mod codec;
pub mod synthetic;

pub use error::{Error, Result};
