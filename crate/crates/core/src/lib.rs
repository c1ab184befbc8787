//! Lightweight encoder-decoder segmentation for CT lesion masks.
//!
//! The crate is self-contained: a dense [`Tensor`] type and numeric
//! [`kernels`], a tape-based reverse-mode [`autograd`] engine, neural
//! [`layers`], the encoder-decoder [`model`] and its baseline UNet, evaluation
//! [`metrics`], CT [`preprocess`]ing and augmentation, volume and checkpoint
//! [`data`] I/O, and the Adam [`train`]ing loop.

pub mod autograd;
pub mod data;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{Gradients, OpKind, Tape, Var};
pub use error::{Error, Result};
pub use model::{ModelSpec, Network, Variant};
pub use params::{Mode, ParamStore, Session};
pub use rng::{Rng, StreamKind};
pub use tensor::{DType, Scalar, Tensor};
