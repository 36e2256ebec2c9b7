//! Cross-architecture knowledge distillation for face recognition at desk
//! scale: a reverse-mode tensor engine, facial positional encoding,
//! prompt-tuned windowed-attention teachers, convolutional students, unified
//! receptive-field mapping attention, and the training and analysis harness.

pub mod distill;
pub mod error;
pub mod facegeom;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod urfm;

pub use error::{Error, Result};
pub use numerics::{ParamBuilder, ParamRegistry, Tensor};
