//! ResNet+ image classification engine.
//!
//! A dense tensor library with reverse-mode autodiff ([`autograd`]), the
//! layers and CBAM attention needed for ResNet-50/101 and their ResNet-D
//! variants ([`model`]), a seeded data pipeline ([`data`]), SGD training with
//! cosine restarts and weight EMA ([`trainer`]), and clinical-style
//! evaluation with ROC/AUC and decision curves ([`metrics`]).

pub mod autograd;
pub mod cbam;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
