//! Evaluate convolutional image classifiers the way psychophysics evaluates
//! observers: sweep a morph continuum, fit psychometric functions, extract
//! points of subjective equality, localize attention with LayerCAM, degrade
//! inputs with region masks, and compare the results against human baselines
//! with corrected t-tests.
//!
//! The crate ships AlexNet, VGG11/13/16 and a feature-excitation variant of
//! AlexNet whose first two fully connected layers are replaced by an unbiased
//! sigmoid gate over the flattened convolutional features. Transfer learning
//! freezes the feature extractor and trains only the classifier head.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod attribution;
pub mod commands;
pub mod error;
pub mod imgops;
pub mod nn;
pub mod plotting;
pub mod psychometrics;
pub mod stats;
pub mod stimuli;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
