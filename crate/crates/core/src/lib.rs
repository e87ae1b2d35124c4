//! Hybrid visual tokenizer: one ViT encoder emitting discrete quantized
//! pixel tokens for reconstruction and continuous learnable semantic tokens
//! trained by asymmetric teacher distillation, at desk scale.

pub mod config;
pub mod data;
pub mod decoder;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plot;
pub mod quantizer;
pub mod training;

pub use config::{Config, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::{ForwardOutput, Model};
