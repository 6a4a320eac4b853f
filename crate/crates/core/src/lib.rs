//! Semi-supervised adversarial domain adaptation with classifier separation.
//!
//! A shared feature extractor feeds one domain-shared classifier and two domain-specific
//! classifiers (source, target). Two discriminators align the domains: one on features, one on
//! the joint of features and shared-head predictions. A diversity term pushes the specific
//! heads away from the shared head, and a focal loss trains on the averaged predictions.
//!
//! Modules follow the data flow: [`datasets`] -> [`networks`] -> [`losses`] -> [`trainer`] ->
//! [`inference`] -> [`metrics`], with [`experiment`] driving full runs from a config file.

pub mod autodiff;
pub mod datasets;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod trainer;

pub use error::{Error, Result};
