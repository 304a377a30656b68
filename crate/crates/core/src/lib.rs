//! What-where-when factorised video attention.
//!
//! The crate bundles a small reverse-mode autodiff engine over `f64`
//! tensors, the attention module itself, a toy residual video backbone with
//! temporal shift and attention-guided feature refinement, a synthetic
//! moving-sprite dataset, two-stage training with feature mimicking, and an
//! analytic FLOPs model for ResNet-50 scale networks.

pub mod attention;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
mod linalg;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, Elementwise, Gradients, PoolMode, Tape, Var};
pub use conv::ConvSpec;
pub use error::{Error, Result};
pub use tensor::Tensor;
