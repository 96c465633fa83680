//! Channel Locality (C-Local) and Squeeze-and-Excitation channel attention
//! in a small CNN training stack written from scratch.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Shape4, Tensor4};

/// Training precision.
pub type Tensor = Tensor4<f32>;
/// Gradient-check precision.
pub type WideTensor = Tensor4<f64>;
pub type Network = model::Model<f32>;
pub type WideNetwork = model::Model<f64>;
pub type Batch = data::LabeledBatch<f32>;
