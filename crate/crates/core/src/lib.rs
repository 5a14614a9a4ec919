//! Deterministic desk-scale pipeline for unsupervised domain adaptation in
//! joint optic disc / optic cup segmentation.
//!
//! The pipeline combines four ingredients:
//!
//! - spectral style transfer: a target image's low-frequency amplitude is
//!   replaced by the batch-averaged source amplitude while its phase is kept
//!   ([`spectral`]);
//! - dynamic-mask cross-domain mixing: binary masks obtained by thresholding
//!   the inverse transform of frequency-decayed Gaussian noise drive a
//!   bi-directional copy-paste between domains ([`maskgen`], [`mixing`]);
//! - confidence-weighted segmentation losses over masked supports
//!   ([`losses`]);
//! - an EMA teacher-student training loop around a tiny convolutional scorer
//!   with analytic backpropagation ([`model`], [`trainer`]).
//!
//! Everything is reproducible: a single 64-bit seed determines the synthetic
//! dataset, every mask, every batch, and every checkpoint byte.

pub mod image;
pub mod losses;
pub mod maskgen;
pub mod metrics;
pub mod mixing;
pub mod model;
pub mod rng;
pub mod spectral;
pub mod synthdata;
pub mod trainer;

mod error;

pub use error::{Error, Result};
pub use image::{BinaryMask, Image, LabelMap, ProbMap};
pub use rng::Rng;
