//! Numerical laboratory for surrogate-conditional training-data extraction
//! from diffusion models.
//!
//! Everything here works on low-dimensional synthetic data so that the
//! quantities of interest (scores, posteriors, memorization divergences) are
//! either available in closed form or cheap to check against brute force.
//!
//! * [`diffusion`]: VP-SDE schedule, tractable score models, guided sampling.
//! * [`surrogate`]: feature maps, k-means, cohesion filtering, pseudo-labels.
//! * [`neural`]: small MLPs with hand-written backprop, time-dependent
//!   classifiers, low-rank conditional fine-tuning.
//! * [`extraction`]: the guided attack, the genetic black-box attack and the
//!   trigger backdoor.
//! * [`metrics`]: similarity bands, AMS/UMS, percentiles, expected unique
//!   memorization and memorization divergence.

pub mod diffusion;
pub mod error;
pub mod extraction;
pub mod linalg;
pub mod metrics;
pub mod neural;
pub mod rng;
pub mod surrogate;

pub use error::{Error, Result};

/// A point in data space.
pub type Sample = Vec<f64>;

/// A sample paired with an integer condition (cluster label or trigger id).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LabeledSample {
    pub x: Sample,
    pub label: usize,
}

impl LabeledSample {
    pub fn new(x: Sample, label: usize) -> Self {
        Self { x, label }
    }
}
