//! Self-questioning vision-language model at toy scale.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod language;
pub mod lora;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod runconfig;
pub mod sampler;
pub mod synthetic;
pub mod trainer;
pub mod vision;
pub mod vocab;
pub mod warmup;

pub use config::{LmConfig, LoraConfig, LoraTowerConfig, ModelConfig, VisionConfig};
pub use error::{Error, Result};
pub use model::{SqLlava, Tower};
