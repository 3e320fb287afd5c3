//! Blind demodulation of multiplicative sweep distortions in time-resolved
//! image stacks.
//!
//! Given `M` frames `y_j = rho * u_j + n_j` of a binary reflectance image
//! `rho` under smooth per-frame distortions `u_j`, [`altmin::solve`]
//! recovers both factors by alternating least-squares distortion fits with a
//! closed-form two-class MAP image update. [`lowrank`] provides the convex
//! nuclear-norm baseline on the lifted problem, [`forward`] a THz reflection
//! simulator with known ground truth, and [`eval`] the error metrics and
//! parameter sweeps.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod altmin;
pub mod config;
pub mod error;
pub mod eval;
pub mod forward;
pub mod lowrank;
pub mod persist;
pub mod subspace;
pub mod types;
pub mod wavelet;

pub use error::{Error, Result};
pub use nalgebra;
pub use types::{FrameStack, ImageGrid, PriorConfig};
