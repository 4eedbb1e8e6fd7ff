//! Unsupervised 3D deformable image registration.
//!
//! A source volume `S` is aligned to a target `T` by predicting a dense
//! displacement field `u` and resampling `S(x + u(x))`. The crate provides
//! the pieces needed to train and evaluate such a predictor from scratch:
//!
//! - [`volume`]: volume, label and displacement-field types with FRV1 and
//!   NIfTI-1 I/O.
//! - [`warp`]: trilinear resampling and its gradient with respect to `u`.
//! - [`jacobian`]: discrete Jacobian determinants of `x + u(x)`, folding
//!   counts and the anti-folding penalty.
//! - [`loss`]: global and local cross-correlation, the smoothness term and
//!   the composed training loss.
//! - [`autodiff`]: a small reverse-mode engine over `(C, D, H, W)` tensors.
//! - [`model`]: the inception-style encoder/decoder network, the direct
//!   field model, and checkpoints.
//! - [`optim`] holds the Adam optimizer.
//! - [`trainer`]: pair enumeration, synthetic data, the training loop and
//!   β sweeps.
//! - [`metrics`]: Dice overlap and folding-count evaluation.
//! - [`gradcheck`]: finite-difference verification suites.
//!
//! All numeric kernels are generic over [`Real`] so they can run in `f32`
//! for training and `f64` for gradient verification. With the `parallel`
//! feature (default) per-voxel loops run on rayon; without it the same code
//! runs sequentially and produces identical results.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod jacobian;
pub mod kv;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub(crate) mod par;
mod real;
pub mod trainer;
pub mod volume;
pub mod warp;

pub use error::{Error, Result};
pub use real::Real;
pub use volume::{Dims, DisplacementField, Volume, VolumeKind};
