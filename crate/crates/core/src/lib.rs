//! Reduced-order modelling toolkit.
//!
//! Burgers full-order model, POD-Galerkin reduction with classical and
//! learned DEIM sampling, a 2-D vortex solver, a convolutional neural ODE
//! surrogate and windowed DEIM point tracking. Everything runs on a small
//! in-crate reverse-mode autodiff engine and dense linear algebra.

pub mod autodiff;
pub mod burgers;
pub mod error;
pub mod fft;
pub mod integrate;
pub mod io;
pub mod linalg;
pub mod node;
pub mod rom;
pub mod sampler;
pub mod snapshot;
pub mod vortex;
pub mod windowed;

pub use error::{Error, Result};
