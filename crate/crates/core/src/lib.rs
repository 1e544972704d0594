//! Hierarchical regional attention MIL on synthetic whole-slide images.
//!
//! The numeric core (tensors, autodiff, optimizer) is generic over the
//! scalar type; the pipeline instantiates it at f64 via the aliases below.

pub mod eval;
pub mod model;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod synthwsi;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
pub use tensor::TensorError;

/// f64 tensor used throughout the pipeline.
pub type Tensor = tensor::Tensor<f64>;
/// f64 autodiff tape.
pub type Tape = tensor::tape::Tape<f64>;
pub type Var = tensor::tape::Var;
pub type Gradients = tensor::tape::Gradients<f64>;
pub type AdamWConfig = tensor::adamw::AdamWConfig<f64>;
pub type AdamWState = tensor::adamw::AdamWState<f64>;

/// f32 variant, exercised in tests to keep the kernels scalar-generic.
pub type Tensor32 = tensor::Tensor<f32>;
