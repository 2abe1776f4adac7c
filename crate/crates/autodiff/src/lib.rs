//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! The engine supplies exactly the operators a small vision-language
//! transformer needs (see [`graph`] for the per-operator shape contracts),
//! a central finite-difference checker in [`gradcheck`], and the tensor
//! archive format in [`serialize`].
//!
//! Everything is single-threaded and reduces in a fixed order, so forward
//! and backward passes are bit-reproducible for identical inputs.

pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod serialize;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, grad_check_sampled, grad_check_sampled_with, op_suite, CheckOptions, GradCheckReport, OpCheck};
pub use graph::{Graph, Var};
pub use tensor::{lit, Scalar, Tensor};
