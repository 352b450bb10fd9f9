//! Deformable convolution with latent-modulated offset prediction, embedded in
//! a small style-based GAN with a training and evaluation harness.

pub mod autodiff;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod deform;
pub mod error;
pub mod gradsuite;
pub(crate) mod kernels;
pub mod metrics;
pub mod ppm;
pub mod rng;
pub mod stylegen;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use rng::{randn, Rng};
pub use tensor::{matmul, Matrix, Tensor};
pub use conv::{ConvSpec, KernelWeights, ModulatedWeights, StyleVector};
pub use deform::{MtmLayer, OffsetField};
