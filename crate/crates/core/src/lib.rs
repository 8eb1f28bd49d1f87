//! Core library of the featseg workbench: pixel feature stacks, upsampled
//! deep features, pixel classifiers, the segmentation workflow and its
//! evaluation.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{Padding, PcaModel, Plane, Tensor};
pub mod features;

pub use features::{FeatureSetConfig, FeatureStack};
pub mod deep;
pub mod classifier;

pub use classifier::{ClassifierKind, ClassifierModel, LabeledSamples, TrainConfig};
pub mod engine;

pub use engine::{Project, Segmentation, SparseLabelMap};
pub mod eval;
