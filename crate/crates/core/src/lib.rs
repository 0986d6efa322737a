//! Weakly-supervised visual anomaly detection that stays robust when the "normal"
//! training split is contaminated with unlabeled anomalies.
//!
//! A detector is trained from a small labeled anomaly set, synthesized pseudo-anomalies
//! and an unlabeled normal pool. Per-sample losses are reweighted on the simplex under a
//! divergence budget, so suspicious training samples lose influence.

pub mod backbone;
pub mod conv;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod heads;
pub mod image;
pub mod losses;
pub mod model;
pub mod noise_synth;
pub mod reweighting;
pub mod trainer;

pub use error::{Error, Result};
