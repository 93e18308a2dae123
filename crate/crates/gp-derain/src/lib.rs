//! Semi-supervised single-image deraining with Gaussian-process latent
//! pseudo-labels.
//!
//! The library trains a small residual encoder–decoder to predict a rain
//! layer that is subtracted from the input. Labeled synthetic pairs drive a
//! supervised image loss; unlabeled rainy images are supervised in latent
//! space instead: each unlabeled latent is pulled toward the posterior mean
//! of a Gaussian process conditioned on its nearest labeled latents
//! ([`gp::pseudo_gt`]), so the encoder is adapted to data for which no clean
//! target exists.
//!
//! The pieces compose bottom-up and can be used on their own:
//!
//! - [`gp`] — cosine-kernel GP conditioning over latent stores,
//! - [`nn`] — a tape-based reverse-mode autodiff core and the
//!   encoder–decoder model built on it,
//! - [`loss`] — image-space (L1 + perceptual) and latent-space losses,
//! - [`data`] — synthetic rain rendering, portable graymap I/O, dataset
//!   layout on disk,
//! - [`metrics`] — PSNR/SSIM and batch evaluation,
//! - [`train`] — the alternating labeled/unlabeled training loop with Adam,
//!   checkpointing and metrics streams,
//! - [`cli`] — the `gp-derain` command line (`gen-data`, `train`, `eval`,
//!   `gp-inspect`).
//!
//! Every random choice flows from explicit seeds; identical configs and
//! seeds reproduce runs bit-for-bit, including across checkpoint/resume.

mod bytes;
pub mod cli;
pub mod data;
pub mod error;
pub mod gp;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
