//! Adapter fine-tuning with gradient learning and offloading.
//!
//! The base device runs one forward and one backward of a frozen model per
//! iteration and records, at every fine-tunable layer, the layer input and
//! the gradient of its output. Adapters are then fitted elsewhere from those
//! records, one update per adaptation interval.

pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod offload;
pub mod optim;
pub mod router;
pub mod scalar;
pub mod tensor;
pub mod theory;

pub use adapter::{Adapter, AdapterKey, AdapterKind, AdapterSet, AdapterSpec};
pub use autodiff::Tape;
pub use engine::{TrainingConfig, Variant};
pub use error::{Error, Result};
pub use model::{BaseModel, Preset};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type Model32 = BaseModel<f32>;
pub type Model64 = BaseModel<f64>;
pub type Adapters32 = AdapterSet<f32>;
pub type Adapters64 = AdapterSet<f64>;
