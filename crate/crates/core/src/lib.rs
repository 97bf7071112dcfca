//! Two-branch cross-view geo-localization with generated cross-modal
//! knowledge and recurrent cross-attention.

pub mod ablation;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cmi;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gkst;
pub mod model;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod training;

pub use backbone::{Branch, FeatureMap};
pub use checkpoint::Checkpoint;
pub use config::{Config, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;
