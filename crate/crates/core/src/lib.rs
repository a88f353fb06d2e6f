//! Convolution-free compressed-sensing MRI reconstruction with cascaded
//! transformer denoisers and k-space data consistency.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`ops`], [`fft`], [`autodiff`]: dense tensors, kernels, the
//!   orthonormal 2D DFT, a reverse-mode gradient tape and its
//!   finite-difference checker ([`gradcheck`]).
//! * [`kaleidoscope`] and [`tokenizer`]: exact image-to-token layouts (patch,
//!   Kaleidoscope, axial) and the learned token embeddings.
//! * [`denoiser`]: pre-norm transformer encoders assembled into residual
//!   denoiser blocks.
//! * [`recon`]: data consistency, zero-filled initialisation and the cascade.
//! * [`harness`]: masks, phantoms, metrics, training, evaluation and
//!   checkpoints.

pub mod autodiff;
pub mod denoiser;
pub mod error;
pub mod fft;
pub mod gradcheck;
pub mod harness;
pub mod kaleidoscope;
pub mod ops;
pub mod recon;
pub mod tensor;
pub mod tokenizer;

pub use autodiff::{Graph, ParamStore, Var};
pub use error::{Error, Result};
pub use tensor::{ComplexTensor, RealTensor};
