//! Scaling-translation-equivariant convolution engine with decomposed filters.
//!
//! The library builds feature maps indexed by space and a scale channel,
//! convolves jointly over both domains, and expands every filter in a fixed
//! separable eigenbasis so only low-frequency coefficients are trained.
//! Alongside the layers it ships the measurement harness (equivariance error,
//! padding/depth sweeps, deformation-stability bound checks) and a small
//! deterministic trainer used for the classification comparison.

// Numeric kernels index in fixed orders on purpose; iterator rewrites hide
// the summation order the tests pin down.
#![allow(clippy::needless_range_loop)]

pub mod actions;
pub mod basis;
pub mod filterbank;
pub mod harness;
pub mod model;
pub mod network;
pub mod tensor;
pub mod trainer;

mod error;

pub use error::{Error, Result};
