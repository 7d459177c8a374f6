//! Embedding learning with a label-smoothed chief classifier and a discriminative
//! sequence-agent auxiliary loss, trained jointly over identity-labelled and
//! sequence-labelled samples.
//!
//! All math is generic over [`Scalar`] (`f32`/`f64`). Checkpoints store `f64`
//! values and the gradient oracles run in `f64`; training runs at the precision
//! the model config asks for.

pub mod config;
mod codec;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod losses;
pub mod network;
pub mod numerics;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use datasets::{BatchPlan, Dataset, LabelSpace, SampleBatch, Source};
pub use losses::{CenterTable, DistanceMode, DsaConfig, LossOutput};
pub use network::{EmbeddingModel, LayerSpec};
pub use numerics::{Rng, Tensor};
pub use trainer::{TrainConfig, Trainer};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Dataset64 = datasets::Dataset<f64>;
pub type Dataset32 = datasets::Dataset<f32>;
pub type Model64 = network::EmbeddingModel<f64>;
pub type Model32 = network::EmbeddingModel<f32>;
pub type CenterTable64 = losses::CenterTable<f64>;
pub type Trainer64 = trainer::Trainer<f64>;
