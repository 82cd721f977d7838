//! Reverse-mode autodiff engine and model zoo for supervised cross-modal
//! fusion segmentation.
//!
//! The crate is `no_std` (with `alloc`) so the numerical core carries no IO.
//! The `std` feature (on by default) only enables runtime CPU feature
//! detection in the matrix-multiply backend.
//!
//! Module map:
//!
//! - [`tensor`], [`graph`], [`kernels`], [`init`]: the differentiable substrate.
//! - [`model`]: U-Net, the fusion baselines, the spatial attention block and
//!   the master–assistant network, plus closed-form parameter counting.
//! - [`objectives`]: Dice + cross-entropy loss and the evaluation metrics.
//! - [`synth`]: two-modality phantom generator, normalization, fold splits.
//! - [`optim`] and [`train`]: AMSGrad, the step-decay schedule and a
//!   resumable training session.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod graph;
pub mod init;
pub mod kernels;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use kernels::ConvGeometry;
pub use tensor::Tensor;
