//! Frequency dynamic convolution for sound event detection.
//!
//! A 2D convolution whose kernel at each frequency bin is a convex
//! combination of `K` basis kernels, weighted by attention computed from the
//! time-averaged input. The crate also carries the input-adaptive (DY) and
//! time-adaptive (TDY) variants, a log-mel front-end, a small configurable
//! CRNN, event decoding and F1 metrics.

pub mod audio;
pub mod dynamic;
mod error;
pub mod init;
pub mod model;
pub mod nn;
pub mod sed;
pub mod suites;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
