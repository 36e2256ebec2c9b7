//! Dense 64-bit tensors, reverse-mode differentiation and the primitive ops
//! the models are built from.

pub mod gradcheck;
mod ops;
pub mod registry;
mod tensor;

pub use registry::{ParamBuilder, ParamRegistry};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
