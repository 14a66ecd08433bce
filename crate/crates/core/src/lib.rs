//! RGB-D fusion image captioning: a small autodiff engine, pixel/feature/hybrid
//! fusion, a transformer encoder-decoder, caption metrics, and training.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod feature_fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pixel_fusion;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
