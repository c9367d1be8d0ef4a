//! Activation-aware low-rank compression of dense weight matrices.
//!
//! The crate is `no_std` (with `alloc`) and purely numerical: linear-algebra
//! kernels, synthetic calibration, the truncation engines with their
//! minimum-loss oracle, and per-site compression-ratio allocation. File
//! formats, timing and the command-line driver live in the `lrf` crate.

#![no_std]

extern crate alloc;

pub mod allocation;
pub mod calibration;
pub mod engines;
pub mod error;
pub mod linalg;
pub mod matrix;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
