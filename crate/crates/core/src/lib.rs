//! Asymmetric cycle-consistent GAN for unpaired translation between an
//! information-rich domain `X` (photos) and an information-poor domain `Y`
//! (label maps), with an encoder `E` that carries the missing detail as an
//! auxiliary code.

pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod losses;
pub mod model;
pub mod nets;
pub mod rng;
pub mod train;

pub use asymgan_autograd as autograd;
pub use asymgan_autograd::{Scalar, Tensor};
pub use error::{Error, Result};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type NetHandle32 = nets::NetHandle<f32>;
pub type ModelBundle32 = model::ModelBundle<f32>;
pub type ModelBundle64 = model::ModelBundle<f64>;
