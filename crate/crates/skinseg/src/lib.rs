//! Skin segmentation pipeline.
//!
//! The pieces, bottom to top:
//!
//! - [`imgio`]: images, masks, PPM/PGM codecs, resampling, synthetic data,
//!   dataset manifests and splits.
//! - [`bayes`]: histogram Bayesian skin color classifier.
//! - [`nncore`]: minimal reverse-mode autodiff engine with the layer set the
//!   segmentation networks need, Adam, and a gradient checker.
//! - [`skinny`]: configurable lightweight U-Net ("Skinny-lite") builder,
//!   inference, and weight serialization.
//! - [`train`]: BCE + soft-Dice losses, BC-stratified masked-loss samples,
//!   and the deterministic training loop.
//! - [`ensemble`]: channel stacking with a learned second-level network,
//!   per-pixel majority voting, and BC-gated branch selection.
//! - [`eval`]: confusion metrics, PR curves, the Wilcoxon signed-rank test,
//!   and error overlays.

pub mod bayes;
pub mod ensemble;
pub mod eval;
pub mod imgio;
pub mod nncore;
pub mod rng;
pub mod skinny;
pub mod train;

pub use bayes::ProbMap;
pub use imgio::{BinaryMask, Image, SamplePair};
