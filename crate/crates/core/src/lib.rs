//! Latent-adversarial autoencoder for continuous attribute editing, with a
//! procedural sprite dataset that has exact counterfactuals.

pub mod blocks;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod probe;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{FaderError, Result};
pub use model::{AttributeCode, FaderModel, ModelConfig};
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainState};
