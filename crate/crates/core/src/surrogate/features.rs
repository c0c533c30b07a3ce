use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{dot, norm};
use crate::rng::{standard_normal, stream};
use crate::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Identity,
    /// Gaussian matrix with entries `N(0, 1 / dim_out)`, generated from `seed`.
    RandomProjection { dim_out: usize, seed: u64 },
    /// Projection onto the leading principal directions of the fitting set.
    Pca {
        dim_out: usize,
        #[serde(default)]
        mean: Option<Vec<f64>>,
        /// Rows are principal directions, largest variance first.
        #[serde(default)]
        basis: Option<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub kind: FeatureKind,
    /// Rescale every output to unit Euclidean norm. Zero vectors stay zero.
    pub normalize: bool,
}

impl FeatureMap {
    pub fn identity(normalize: bool) -> Self {
        Self { kind: FeatureKind::Identity, normalize }
    }

    pub fn random_projection(dim_out: usize, seed: u64, normalize: bool) -> Self {
        Self { kind: FeatureKind::RandomProjection { dim_out, seed }, normalize }
    }

    pub fn pca(dim_out: usize, normalize: bool) -> Self {
        Self { kind: FeatureKind::Pca { dim_out, mean: None, basis: None }, normalize }
    }

    pub fn needs_fit(&self) -> bool {
        matches!(self.kind, FeatureKind::Pca { basis: None, .. })
    }

    /// The `dim_out x dim_in` matrix used by a random projection.
    pub fn projection_matrix(&self, dim_in: usize) -> Option<Vec<Vec<f64>>> {
        match self.kind {
            FeatureKind::RandomProjection { dim_out, seed } => {
                let mut rng = stream(seed, dim_in as u64);
                let s = 1.0 / (dim_out as f64).sqrt();
                Some(
                    (0..dim_out)
                        .map(|_| standard_normal(&mut rng, dim_in).into_iter().map(|z| s * z).collect::<Vec<f64>>())
                        .collect(),
                )
            }
            _ => None,
        }
    }

    /// Fit the PCA basis; a no-op for the other kinds.
    pub fn fit(&mut self, xs: &[Sample]) -> Result<()> {
        let FeatureKind::Pca { dim_out, mean, basis } = &mut self.kind else {
            return Ok(());
        };
        let d = xs.first().ok_or_else(|| invalid("cannot fit PCA on no data"))?.len();
        if *dim_out == 0 || *dim_out > d {
            return Err(invalid(format!("PCA output dimension {dim_out} not in 1..={d}")));
        }
        for x in xs {
            check_dim(d, x.len())?;
        }
        let mu = crate::linalg::mean(xs);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for x in xs {
            let c: Vec<f64> = x.iter().zip(&mu).map(|(a, b)| a - b).collect();
            for i in 0..d {
                for j in 0..d {
                    cov[(i, j)] += c[i] * c[j];
                }
            }
        }
        cov /= xs.len() as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let rows = order[..*dim_out]
            .iter()
            .map(|&k| {
                let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
                // fix the sign so the largest-magnitude entry is positive
                let lead = v.iter().copied().fold(0.0f64, |m, a| if a.abs() > m.abs() { a } else { m });
                if lead < 0.0 {
                    v.iter_mut().for_each(|a| *a = -*a);
                }
                v
            })
            .collect();
        *mean = Some(mu);
        *basis = Some(rows);
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = match &self.kind {
            FeatureKind::Identity => x.to_vec(),
            FeatureKind::RandomProjection { .. } => {
                let m = self.projection_matrix(x.len()).unwrap();
                m.iter().map(|row| dot(row, x)).collect()
            }
            FeatureKind::Pca { mean, basis, .. } => {
                let (Some(mu), Some(b)) = (mean, basis) else {
                    return Err(Error::NotFitted);
                };
                check_dim(mu.len(), x.len())?;
                let c: Vec<f64> = x.iter().zip(mu).map(|(a, m)| a - m).collect();
                b.iter().map(|row| dot(row, &c)).collect()
            }
        };
        if self.normalize {
            let n = norm(&z);
            if n > 0.0 {
                z.iter_mut().for_each(|v| *v /= n);
            }
        }
        Ok(z)
    }
}

pub fn extract_features(fmap: &FeatureMap, xs: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let d = xs.first().ok_or_else(|| invalid("no samples to featurise"))?.len();
    if let FeatureKind::RandomProjection { .. } = fmap.kind {
        let m = fmap.projection_matrix(d).unwrap();
        return xs
            .iter()
            .map(|x| {
                check_dim(d, x.len())?;
                let mut z: Vec<f64> = m.iter().map(|row| dot(row, x)).collect();
                if fmap.normalize {
                    let n = norm(&z);
                    if n > 0.0 {
                        z.iter_mut().for_each(|v| *v /= n);
                    }
                }
                Ok(z)
            })
            .collect();
    }
    xs.iter()
        .map(|x| {
            check_dim(d, x.len())?;
            fmap.apply(x)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> Vec<Sample> {
        vec![vec![1.0, 0.0, -2.0, 0.5], vec![0.0, 3.0, 1.0, -1.0], vec![2.5, -1.5, 0.0, 4.0]]
    }

    #[test]
    fn identity_and_normalization() {
        let xs = inputs();
        assert_eq!(extract_features(&FeatureMap::identity(false), &xs).unwrap(), xs);
        for z in extract_features(&FeatureMap::identity(true), &xs).unwrap() {
            assert!((norm(&z) - 1.0).abs() < 1e-12);
        }
        assert!(extract_features(&FeatureMap::identity(false), &[]).is_err());
    }

    #[test]
    fn random_projection_is_a_matrix_product() {
        let xs = inputs();
        let f = FeatureMap::random_projection(2, 7, false);
        let m = f.projection_matrix(4).unwrap();
        assert_eq!(m.len(), 2);
        let z = extract_features(&f, &xs).unwrap();
        for (x, zi) in xs.iter().zip(&z) {
            for r in 0..2 {
                let mut acc = 0.0;
                for c in 0..4 {
                    acc += m[r][c] * x[c];
                }
                assert!((zi[r] - acc).abs() < 1e-12);
            }
        }
        // Same kind and seed, same features.
        assert_eq!(extract_features(&FeatureMap::random_projection(2, 7, false), &xs).unwrap(), z);
        assert_ne!(extract_features(&FeatureMap::random_projection(2, 8, false), &xs).unwrap(), z);
    }

    #[test]
    fn pca_requires_fit_and_recovers_dominant_axis() {
        let mut f = FeatureMap::pca(1, false);
        assert!(matches!(extract_features(&f, &inputs()), Err(Error::NotFitted)));
        let mut r = stream(3, 0);
        let xs: Vec<Sample> = (0..400)
            .map(|_| {
                let z = standard_normal(&mut r, 3);
                vec![5.0 * z[0] + 1.0, 0.3 * z[1], 0.1 * z[2] - 2.0]
            })
            .collect();
        f.fit(&xs).unwrap();
        let FeatureKind::Pca { basis: Some(b), .. } = &f.kind else { panic!() };
        assert!(b[0][0] > 0.999, "{:?}", b[0]);
        let z = extract_features(&f, &xs).unwrap();
        let m: f64 = z.iter().map(|v| v[0]).sum::<f64>() / z.len() as f64;
        assert!(m.abs() < 1e-9);
        assert!(FeatureMap::pca(4, false).fit(&xs).is_err());
    }

    #[test]
    fn feature_map_serde_round_trip() {
        let mut f = FeatureMap::pca(2, true);
        f.fit(&inputs()).unwrap();
        let back: FeatureMap = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(back, f);
    }
}
