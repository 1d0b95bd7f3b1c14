//! Energy disaggregation for building flexibility detection.
//!
//! The whole-building power signal is cut into causal sliding windows and fed to
//! one binary classifier per appliance (naive Bayes, k-nearest neighbours, an
//! SMO-trained RBF support vector machine, or AdaBoost over decision stumps).
//! Optionally, the windows are first passed through a restricted Boltzmann
//! machine trained with contrastive divergence and the hidden-unit
//! probabilities are used as features instead.
//!
//! The detections feed a flexibility report that splits the building load into
//! a flexible part (shiftable appliances) and an inflexible remainder.

pub mod classifiers;
pub mod config;
pub mod data;
pub mod error;
pub mod flex;
pub mod ingest;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod rbm;
pub mod synth;

pub use classifiers::{Classifier, Method};
pub use config::Config;
pub use data::{ApplianceKind, ConfusionMatrix, LabelPolicy, TimeSeries, WindowMatrix};
pub use error::{NilmError, Result};
pub use rbm::{CdConfig, Rbm};
