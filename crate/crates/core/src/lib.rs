//! Fast single-image shadow detection.
//!
//! The pipeline runs in two stages. A mean-shift segmentation splits the
//! image into superpixels; a χ²-kernel SVM over per-region color and texton
//! histograms turns each region into a shadow probability, giving a
//! piecewise-constant prior map `P`. A patch-level CNN then consumes 32×32
//! RGBP windows, but only at one interior point per region and at the region
//! boundary pixels that survive the relative-confidence filter, instead of at
//! every pixel. This keeps the number of network evaluations per image one or
//! two orders of magnitude below a dense sliding window.
//!
//! Module map:
//!
//! - [`imageio`]: rasters, PNG/PPM codecs, sRGB to CIELAB, RGBP patches.
//! - [`segmentation`]: mean-shift superpixels and region geometry.
//! - [`features`]: Lab color histograms, filter bank, textons, χ² kernel.
//! - [`prior`]: region labels, SMO-trained SVM, Platt calibration, prior map.
//! - [`cnn`]: the patch network, its loss, training and gradient check.
//! - [`detector`]: region prediction, region filter, edge refinement.
//! - [`evaluation`]: accuracy metrics, dataset loading, synthetic scenes,
//!   benchmarking.
//! - [`pipeline`]: dataset-level training of both models.
//! - [`container`]: the `UMB1` binary model file format.

pub mod cnn;
pub mod container;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod imageio;
pub mod pipeline;
pub mod prior;
pub mod segmentation;

pub use error::{Error, Result};
