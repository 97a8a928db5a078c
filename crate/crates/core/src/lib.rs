//! Temporally consistent infrared-visible video fusion.

pub mod codec;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod metrics;
pub mod numerics;
pub mod objectives;
pub mod oracles;
pub mod pipeline;
pub mod sampler;
pub mod scenes;
pub mod training;

pub use error::{Error, Result};
