//! Monocular height estimation from aerial ortho-images.

pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod height;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod params;
pub mod render;
pub mod train;

pub use candle_core::DType;
pub use error::{Error, Result};
pub use height::HeightRange;
pub use model::{HeightFormer, ModelConfig, ModelOutput, ParameterCount};
