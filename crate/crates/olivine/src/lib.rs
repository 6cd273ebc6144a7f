//! Olivine: an image-classification pipeline for small produce-sorting
//! datasets, built to be verifiable at desk scale.
//!
//! The crate covers the full workflow: PNM image I/O, segmentation-based
//! preprocessing (Gaussian blur, Otsu thresholding, contour cropping, optional
//! depth masking), seeded augmentation, stratified dataset management with a
//! synthetic five-class benchmark generator, two miniature CNN presets with
//! exact backpropagation, Adam training with early stopping, and confusion
//! matrix evaluation. Every random draw flows through one seedable generator,
//! so whole pipeline runs are bit-reproducible.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod threads;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
