//! E-HybridNet: a convolutional image classifier with a wavelet scattering
//! stream fused into the backbone, plus the training and evaluation
//! machinery around it.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`tape`], [`ops`], [`gradcheck`]: a small reverse-mode
//!   autodiff core over dense NCHW `f64` tensors.
//! - [`wavelets`], [`scattering`]: the Morlet filter bank and the
//!   first-order scattering transform.
//! - [`params`], [`fusion`], [`network`]: parameter storage, Hybrid Fusion
//!   blocks, and the full backbone in hybrid and baseline forms.
//! - [`metrics`], [`train`]: mean average precision and the SGD loop.
//! - [`data`], [`config`], [`io`], [`cli`]: datasets, run configuration,
//!   on-disk formats, and the command-line front end.

pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod scattering;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod wavelets;

pub mod cli;

pub use error::{Error, Result};
