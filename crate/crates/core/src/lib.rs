pub mod audio;
pub mod config;
pub mod dataset;
pub mod diffusion;
mod error;
pub mod fdgn;
pub mod gcrm;
pub mod metrics;
pub mod motion;
mod nets;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
