//! Numerical laboratory for error control in recurrent state tracking.
//!
//! The crate implements a canonical recursive layer
//! `h_t = φ(g(h_{t-1},x_t) ⊙ (A(x_t)·h_{t-1}) + b(x_t))`, a zoo of affine and
//! state-dependent instantiations of it, finite-group state-tracking tasks, a
//! curriculum training protocol with length-generalization evaluation, and
//! the diagnostics that explain when and why affine recurrences stop tracking:
//! perturbation recovery, the distinguishability ratio q(t) = R(t)/M(t),
//! symbolic-subspace error decomposition, and crossing/correlation analysis.
//! Exact hand-built trackers for C2/C3/S3 come with numerical verifiers for
//! the affine-neutrality theorem and the finite-horizon error budget.

pub mod autodiff;
pub mod diagnostics;
pub mod error;
pub mod groups;
pub mod network;
pub mod operators;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
