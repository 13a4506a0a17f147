//! Attention behavior fine-tuning (ABFT) on toy decoder-only transformers.
//!
//! The crate is `no_std` compatible (it needs `alloc`). Everything that
//! touches the filesystem, the clock or the command line lives in the
//! `abft-lab` companion crate.
//!
//! Layout:
//! - [`tensor`] and [`tape`]: dense tensors and reverse-mode autodiff.
//! - [`optim`]: Adam with pseudo-batch gradient accumulation.
//! - [`model`]: the transformer with per-head attention capture.
//! - [`data`]: ICL sample construction, pretraining corpus, text ingestion.
//! - [`abft`]: induction-head filter, attention loss and PID balancing.
//! - [`train`]: ABFT, end-to-end and pretraining loops.
//! - [`analysis`]: accuracy, head counts, profiles, connectivity, shift maps.

#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::too_many_arguments)]

extern crate alloc;

pub mod abft;
pub mod analysis;
pub mod data;
mod error;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

/// Token identifier.
pub type TokenId = u32;
