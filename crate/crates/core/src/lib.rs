//! Spurious-correlation guided synthesis.
//!
//! Train a classifier, collect the training images it gets wrong, cluster and
//! sample them, turn the classifier's attention on its wrong prediction into a
//! preserve-mask, synthesize new images that keep those regions while drawing
//! the true class, and retrain on the augmented set.

pub mod cam;
pub mod cluster;
pub mod dataset;
pub mod error;
pub mod fsio;
pub mod harvest;
pub mod image;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use dataset::{DatasetManifest, Group, LabeledImage, Provenance, Split};
pub use error::{Error, Result};
pub use image::Image;
pub use model::{ArchSpec, Classifier, ConvProbe, FeatureVector};
