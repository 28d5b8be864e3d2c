//! Groupwise multimodal image registration engine.
//!
//! The crate aligns a group of images into a shared coordinate space by
//! alternating two steps: estimating a latent anatomy field (class
//! probabilities plus prior proportions) from the warped intensities, and
//! taking gradient steps on parametric spatial transforms against an
//! information-theoretic similarity metric. Classic groupwise metrics
//! (congealing, accumulated pairwise mutual information, conditional
//! template entropy, intensity variance, Gaussian mixture likelihood) share
//! the same resampling context, so any of them can drive the same pipelines.
//!
//! Submodules:
//! - [`grid`], [`volume`], [`sample`]: grids, volumes, interpolation, the
//!   portable `.pvol` format, and stochastic coordinate sampling.
//! - [`transform`]: translation / rigid / affine / free-form deformation
//!   models, their parameter Jacobians, and the unbiased zero-mean
//!   constraint.
//! - [`density`]: Parzen-window tables, entropies and posterior updates.
//! - [`metrics`]: groupwise similarity metrics with analytic gradients.
//! - [`coreg`]: the alternating optimization driver, Adam, pyramids and the
//!   staged registration protocols.
//! - [`eval`]: synthetic phantoms, misalignment generators and the warping
//!   index / registration error / overlap scores.

pub mod coreg;
pub mod density;
pub mod error;
pub mod eval;
pub mod grid;
pub mod metrics;
pub mod sample;
pub mod transform;
pub mod volume;

pub use error::{Error, Result};
pub use grid::{Grid, Point};
pub use volume::Volume;
