use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{dot, norm, sq_dist};
use crate::rng::stream;

pub const KMEANS_MAX_ITERS: usize = 300;
pub const KMEANS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index (into `centroids`) of every clustered feature.
    pub assignments: Vec<usize>,
    /// Mean cosine similarity of members to their centroid; -1 for an empty cluster.
    pub cohesion: Vec<f64>,
    /// Original indices of the surviving clusters, ascending. Label `j`
    /// refers to centroid `kept_ids[j]`.
    pub kept_ids: Vec<usize>,
    #[serde(default)]
    pub threshold: Option<f64>,
    pub iterations: usize,
    pub objective: f64,
}

impl ClusterModel {
    pub fn kept_count(&self) -> usize {
        self.kept_ids.len()
    }

    pub fn kept_centroids(&self) -> Vec<&[f64]> {
        self.kept_ids.iter().map(|&k| self.centroids[k].as_slice()).collect()
    }

    /// Original cluster index of label `label`.
    pub fn original_id(&self, label: usize) -> Option<usize> {
        self.kept_ids.get(label).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn nearest<'a>(z: &[f64], centroids: impl Iterator<Item = &'a [f64]>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.enumerate() {
        let d = sq_dist(z, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign(z: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    z.par_iter().map(|p| nearest(p, centroids.iter().map(Vec::as_slice))).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b && norm(a) > 0.0 {
        return 1.0;
    }
    let n = norm(a) * norm(b);
    if n == 0.0 {
        0.0
    } else {
        (dot(a, b) / n).clamp(-1.0, 1.0)
    }
}

fn plus_plus_init<R: Rng>(z: &[Vec<f64>], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![z[rng.random_range(0..z.len())].clone()];
    let mut d2: Vec<f64> = z.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = z.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..z.len())
        };
        centroids.push(z[next].clone());
        for (p, d) in z.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

/// Lloyd's algorithm from a k-means++ start. Stops after
/// [`KMEANS_MAX_ITERS`] iterations or when no centroid moves by more than
/// [`KMEANS_TOL`]. An emptied cluster is re-seeded at the point farthest from
/// its current centroid. All clusters start out kept.
pub fn kmeans(z: &[Vec<f64>], k: usize, seed: u64) -> Result<ClusterModel> {
    if k == 0 {
        return Err(invalid("k-means needs k >= 1"));
    }
    if k > z.len() {
        return Err(invalid(format!("k = {k} exceeds the {} points", z.len())));
    }
    let d = z[0].len();
    for p in z {
        check_dim(d, p.len())?;
    }
    let mut rng = stream(seed, 0);
    let mut centroids = plus_plus_init(z, k, &mut rng);
    let mut labels = assign(z, &centroids);
    let mut objective: f64 = labels.iter().map(|l| l.1).sum();
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &(c, _)) in z.iter().zip(&labels) {
            counts[c] += 1;
            crate::linalg::axpy(1.0, p, &mut sums[c]);
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let next = if counts[c] > 0 {
                sums[c].iter().map(|s| s / counts[c] as f64).collect()
            } else {
                let far = (0..z.len()).max_by(|&a, &b| labels[a].1.total_cmp(&labels[b].1)).unwrap();
                labels[far].1 = 0.0;
                z[far].clone()
            };
            shift = shift.max(sq_dist(&next, &centroids[c]).sqrt());
            centroids[c] = next;
        }
        labels = assign(z, &centroids);
        let next_obj: f64 = labels.iter().map(|l| l.1).sum();
        debug_assert!(
            next_obj <= objective * (1.0 + 1e-9) + 1e-12,
            "k-means objective rose from {objective} to {next_obj}"
        );
        objective = next_obj;
        if shift < KMEANS_TOL {
            break;
        }
    }
    let assignments: Vec<usize> = labels.iter().map(|l| l.0).collect();
    let mut cohesion = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in z.iter().zip(&assignments) {
        cohesion[c] += cosine(p, &centroids[c]);
        counts[c] += 1;
    }
    for c in 0..k {
        cohesion[c] = if counts[c] == 0 { -1.0 } else { cohesion[c] / counts[c] as f64 };
    }
    Ok(ClusterModel {
        k,
        centroids,
        assignments,
        cohesion,
        kept_ids: (0..k).collect(),
        threshold: None,
        iterations,
        objective,
    })
}

/// Keep clusters with cohesion at least `tau`. Centroids are not recomputed.
pub fn filter_clusters(mut model: ClusterModel, tau: f64) -> Result<ClusterModel> {
    model.kept_ids = (0..model.k).filter(|&c| model.cohesion[c] >= tau).collect();
    if model.kept_ids.is_empty() {
        return Err(Error::NoSurvivingCluster { tau });
    }
    model.threshold = Some(tau);
    Ok(model)
}

/// Label each feature with its nearest kept centroid; ties go to the lower label.
pub fn assign_labels(z: &[Vec<f64>], model: &ClusterModel) -> Result<Vec<usize>> {
    if model.kept_ids.is_empty() {
        return Err(Error::NoSurvivingCluster { tau: model.threshold.unwrap_or(f64::NAN) });
    }
    let d = model.centroids[0].len();
    for p in z {
        check_dim(d, p.len())?;
    }
    let kept = model.kept_centroids();
    Ok(z.par_iter().map(|p| nearest(p, kept.iter().copied()).0).collect())
}
