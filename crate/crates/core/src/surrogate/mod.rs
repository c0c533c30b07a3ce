//! Implicit labels for unlabelled generations: features, k-means, cohesion
//! filtering and nearest-centroid pseudo-labels.

mod cluster;
mod features;

pub use cluster::{assign_labels, filter_clusters, kmeans, ClusterModel, KMEANS_MAX_ITERS, KMEANS_TOL};
pub use features::{extract_features, FeatureKind, FeatureMap};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::{LabeledSample, Sample};

pub const DEFAULT_CLUSTERS: usize = 100;
pub const DEFAULT_COHESION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub clusters: usize,
    pub cohesion: f64,
    pub features: FeatureMap,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { clusters: DEFAULT_CLUSTERS, cohesion: DEFAULT_COHESION, features: FeatureMap::identity(false), seed: 0 }
    }
}

/// Cluster `samples` in feature space, drop incoherent clusters and label
/// every sample with its nearest surviving centroid.
///
/// A PCA feature map that has not been fitted yet is fitted on `samples`.
pub fn build_labeled_dataset(samples: &[Sample], cfg: &SurrogateConfig) -> Result<(ClusterModel, Vec<LabeledSample>)> {
    if samples.is_empty() {
        return Err(invalid("no samples to label"));
    }
    let mut fmap = cfg.features.clone();
    if fmap.needs_fit() {
        fmap.fit(samples)?;
    }
    let z = extract_features(&fmap, samples)?;
    let model = filter_clusters(kmeans(&z, cfg.clusters, cfg.seed)?, cfg.cohesion)?;
    let labels = assign_labels(&z, &model)?;
    let labeled = samples.iter().zip(labels).map(|(x, y)| LabeledSample::new(x.clone(), y)).collect();
    Ok((model, labeled))
}
