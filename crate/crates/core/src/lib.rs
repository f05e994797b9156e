//! Numerical core for rectified-flow inversion and editing experiments.
//!
//! The crate bundles four pieces that together make the desk-scale toolkit:
//!
//! - [`tableau`]: a registry of explicit Runge-Kutta Butcher tableaus with
//!   validation and order classification,
//! - [`solver`]: fixed-step RK inversion/denoising over a [0, 1] time grid,
//!   including slope reuse, NFE accounting, convergence-order estimation and
//!   perturbed integration for the error-bound experiment,
//! - [`velocity`] / [`analytic`] / [`mmdit`]: the velocity-field contract,
//!   closed-form test fields, and a deterministic seeded toy multimodal
//!   diffusion transformer,
//! - [`attention`] / [`pipeline`]: decoupled attention quadrants, replace/mean
//!   manipulation with an inversion-branch cache, word-pixel response maps and
//!   the end-to-end reconstruction/editing/experiment drivers.
//!
//! Everything here is deterministic given a seed and allocation-only
//! (`no_std` + `alloc`); file formats, CLI and plots live in the companion
//! `rkflow-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod analytic;
pub mod attention;
pub mod latent;
pub mod linalg;
pub mod metrics;
pub mod mmdit;
pub mod pipeline;
pub mod rng;
pub mod solver;
pub mod tableau;
pub mod velocity;

pub use latent::{LatentState, Shape};
pub use tableau::{ButcherTableau, OrderReport};
