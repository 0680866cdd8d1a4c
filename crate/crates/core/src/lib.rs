//! Conditional-GAN retinal vessel segmentation.
//!
//! The crate is self-contained: a small reverse-mode autodiff tape with the
//! convolution, batch-norm and activation primitives ([`autograd`]), the
//! U-shaped residual generator and strided-conv discriminator ([`nn`]), the
//! adversarial + λ·L1 objective ([`objective`]), dataset ingestion,
//! augmentation and a synthetic phantom generator ([`datapipe`]), the
//! alternating trainer ([`trainer`]) and pixel-level metrics ([`metrics`]).

pub mod autograd;
pub mod checkpoint;
pub mod datapipe;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use autograd::{Activation, Tape, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
