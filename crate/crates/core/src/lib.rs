//! Kernels, training graph, model builders and layer benchmarks for networks
//! that replace spatial convolutions with a learnable per-channel shift
//! followed by a pointwise convolution.

pub mod bench;
pub mod data;
pub mod error;
pub mod kernels;
pub mod nn;
pub mod parallel;
pub mod shift;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Shape4, Tensor};
