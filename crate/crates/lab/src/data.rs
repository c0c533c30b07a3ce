use std::path::Path;

use side_core::rng::{standard_normal, stream};
use side_core::{LabeledSample, Sample};

use crate::config::DataSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<Sample>,
    /// Generating component of each point, when known.
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn labeled(&self) -> Option<Vec<LabeledSample>> {
        let labels = self.labels.as_ref()?;
        Some(self.points.iter().zip(labels).map(|(x, &y)| LabeledSample::new(x.clone(), y)).collect())
    }
}

/// `clusters` blobs of `per_cluster` points, ordered blob by blob.
pub fn blobs(clusters: usize, dim: usize, per_cluster: usize, sigma: f64, mean_scale: f64, seed: u64) -> Dataset {
    let mut rng = stream(seed, 0);
    let means: Vec<Sample> =
        (0..clusters).map(|_| standard_normal(&mut rng, dim).into_iter().map(|v| mean_scale * v).collect()).collect();
    let mut points = Vec::with_capacity(clusters * per_cluster);
    let mut labels = Vec::with_capacity(clusters * per_cluster);
    for (k, m) in means.iter().enumerate() {
        for _ in 0..per_cluster {
            points.push(standard_normal(&mut rng, dim).iter().zip(m).map(|(z, mu)| mu + sigma * z).collect());
            labels.push(k);
        }
    }
    Dataset { points, labels: Some(labels) }
}

pub fn load_csv(path: &Path) -> anyhow::Result<Dataset> {
    let mut rd = csv::Reader::from_path(path)?;
    let headers = rd.headers()?.clone();
    let label_col = headers.iter().position(|h| h == "label");
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let mut x = Vec::with_capacity(rec.len());
        for (j, v) in rec.iter().enumerate() {
            if Some(j) == label_col {
                labels.push(v.trim().parse::<usize>()?);
            } else {
                x.push(v.trim().parse::<f64>()?);
            }
        }
        if let Some(first) = points.first() {
            anyhow::ensure!(Vec::len(first) == x.len(), "ragged rows in {}", path.display());
        }
        anyhow::ensure!(x.iter().all(|v: &f64| v.is_finite()), "non-finite value in {}", path.display());
        points.push(x);
    }
    anyhow::ensure!(!points.is_empty() && !points[0].is_empty(), "{} holds no data", path.display());
    Ok(Dataset { points, labels: label_col.map(|_| labels) })
}

pub fn load(spec: &DataSpec, seed: u64) -> anyhow::Result<Dataset> {
    match spec {
        &DataSpec::Blobs { clusters, dim, per_cluster, sigma, mean_scale } => {
            anyhow::ensure!(clusters > 0 && dim > 0 && per_cluster > 0, "blob dataset would be empty");
            anyhow::ensure!(sigma >= 0.0 && mean_scale >= 0.0, "blob scales must be nonnegative");
            Ok(blobs(clusters, dim, per_cluster, sigma, mean_scale, seed))
        }
        DataSpec::File { path } => load_csv(path),
    }
}
