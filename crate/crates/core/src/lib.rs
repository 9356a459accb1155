//! Few-shot semantic segmentation with self-guided support vectors.
//!
//! A support image and its mask are encoded into an initial prototype by
//! masked average pooling. The model segments the support image with that
//! prototype, then splits the ground-truth foreground into the part it
//! recovered (primary vector) and the part it missed (auxiliary vector).
//! Both vectors guide the query segmentation. For K-shot episodes the
//! per-support predictions are fused with weights given by how well each
//! support segments the others.
//!
//! Modules, bottom-up:
//! - [`numerics`]: `f64` tensors and a reverse-mode differentiation tape.
//! - [`episodes`]: synthetic shape datasets, PPM/PGM ingestion, episode sampling.
//! - [`prototypes`]: masked pooling and the primary/auxiliary decomposition.
//! - [`network`]: encoder, feature processing modules, decoder, checkpoints.
//! - [`training`]: losses, episodic SGD.
//! - [`inference`]: one-shot prediction, cross-guided and average fusion, metrics.
//! - [`ablation`]: variant grids over support vectors and losses.

pub mod ablation;
pub mod episodes;
pub mod error;
pub mod inference;
pub mod network;
pub mod numerics;
pub mod prototypes;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
