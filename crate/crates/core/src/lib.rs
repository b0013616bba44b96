//! Numerical core for a desk-scale speech-to-text alignment stack.
//!
//! Everything in here is pure computation over `f64` buffers:
//!
//! - [`tensor`] / [`tape`]: a dense row-major tensor and a reverse-mode
//!   tape that is rebuilt on every forward pass,
//! - [`block`]: the single pre-norm transformer layer the adapters use,
//! - [`ctc`]: forward-backward lattice loss, greedy decoding and peak
//!   extraction over the blank-extended label alphabet,
//! - [`adapters`]: the alignment adapter (frame-pair projection + one
//!   transformer layer + CTC head), the peak-driven shrinking adapter and
//!   low-rank weight deltas for a frozen decoder,
//! - [`mixture`]: temperature-scheduled multi-task sampling,
//! - [`checkpoint`]: the named-array container used for parameter files,
//! - [`gradcheck`]: central finite-difference verification.
//!
//! The crate is `no_std` (with `alloc`) when built without the default
//! `std` feature; IO, file formats and the CLI live in the companion
//! `soundwave-kit` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapters;
pub mod block;
pub mod checkpoint;
pub mod ctc;
pub mod error;
pub mod frames;
pub mod gradcheck;
pub mod mixture;
pub(crate) mod scalar;
pub mod tape;
pub mod tensor;

pub use block::TransformerBlockParams;
pub use error::CoreError;
pub use tape::{GradStore, Tape, Value};
pub use tensor::Tensor;

/// Result alias used across the crate.
pub type Result<T> = core::result::Result<T, CoreError>;
