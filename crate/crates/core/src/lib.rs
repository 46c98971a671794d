//! Set-encoding identification of nonlinear dynamics.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: a small tape-based reverse-mode autodiff engine with the
//!   neural building blocks (dense, permutation-equivariant, multi-head
//!   attention, layer norm) and an Adam optimizer.
//! - [`dynamics`]: ground-truth simulators for Lotka–Volterra, Lorenz and the
//!   1-D heat equation, plus Sobol sampling of parameter spaces.
//! - [`signal`]: noise injection, derivative estimation (central differences,
//!   total-variation regularized), cumulative trapezoidal integration, windows.
//! - [`sindy`]: candidate-function libraries and sparse regression (STLSQ,
//!   coordinate-descent lasso) that produce coefficient labels.
//! - [`models`]: the OASIS baseline MLP, Deep Set and Set Transformer.
//! - [`train`]: dataset assembly, composite losses, staged learning rates.
//! - [`eval`]: forecasting harness and metrics (MAPE, sMAPE, R², weighted R²).
//! - [`experiment`]: the JSON experiment configuration shared by the CLI.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod models;
pub mod rng;
pub mod signal;
pub mod sindy;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
