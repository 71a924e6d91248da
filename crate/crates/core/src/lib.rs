//! Test-time adaptation of a small video denoiser.
//!
//! The crate is organised bottom-up:
//!
//! - [`scene`] renders moving-shape clips with analytic flow and boxes.
//! - [`flow`] holds flow fields, boxes, `.flo` I/O and the detector / flow
//!   estimator plug-in points.
//! - [`masking`] partitions frames into patches, computes mask budgets,
//!   selects motion-ranked patches and scores latent reconstructions.
//! - [`prompt`] tokenizes, augments and masks prompts and scores the masked
//!   token reconstruction.
//! - [`tape`] is a reverse-mode autodiff tape over `f64` tensors.
//! - [`models`] defines the latent codec, text encoder, denoiser and heads.
//! - [`weighting`] turns pooled video/text features into loss weights.
//! - [`engine`] runs per-instance adaptation and episodic reset.
//! - [`container`] reads and writes tensor checkpoints and graymaps.

pub mod container;
pub mod engine;
pub mod error;
pub mod flow;
pub mod masking;
pub mod models;
pub mod prompt;
pub mod scene;
pub mod seed;
pub mod selfcheck;
pub mod tape;
pub mod weighting;

pub use error::{Error, Result};
