//! Reverse-mode automatic differentiation for the image-translation models.
//!
//! Everything is generic over [`Scalar`] so the same network code runs in
//! `f32` for training and `f64` for finite-difference gradient checks.

pub mod conv;
pub mod error;
pub mod graph;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use conv::{ConvGeom, Pad4};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, TvSign, Var};
pub use optim::{Adam, AdamConfig};
pub use scalar::{matmul, Scalar};
pub use tensor::Tensor;
