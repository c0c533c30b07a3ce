use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{all_finite, dist, dot, norm};
use crate::surrogate::FeatureMap;

/// Pairwise similarity, larger meaning more alike.
///
/// `NegNormalizedL2` maps `delta = |a - b| / (1 + |a| + |b|)` to
/// `1 / (1 + delta)`, which lies in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SimilarityFn {
    CosineFeature { features: FeatureMap },
    NegNormalizedL2,
}

impl Default for SimilarityFn {
    fn default() -> Self {
        SimilarityFn::NegNormalizedL2
    }
}

#[derive(Debug, Clone)]
struct Prepared {
    v: Vec<f64>,
    norm: f64,
}

impl SimilarityFn {
    fn prepare(&self, x: &[f64]) -> Result<Prepared> {
        let v = match self {
            SimilarityFn::CosineFeature { features } => features.apply(x)?,
            SimilarityFn::NegNormalizedL2 => x.to_vec(),
        };
        let norm = norm(&v);
        Ok(Prepared { v, norm })
    }

    fn pair(&self, a: &Prepared, b: &Prepared) -> Result<f64> {
        match self {
            SimilarityFn::CosineFeature { .. } => {
                if a.norm == 0.0 || b.norm == 0.0 {
                    return Err(Error::UndefinedSimilarity);
                }
                if a.v == b.v {
                    return Ok(1.0);
                }
                Ok((dot(&a.v, &b.v) / (a.norm * b.norm)).clamp(-1.0, 1.0))
            }
            SimilarityFn::NegNormalizedL2 => {
                let delta = dist(&a.v, &b.v) / (1.0 + (a.norm + b.norm));
                Ok(1.0 / (1.0 + delta))
            }
        }
    }
}

pub fn similarity(f: &SimilarityFn, a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    f.pair(&f.prepare(a)?, &f.prepare(b)?)
}

/// A reference set (the training data) prepared once for repeated queries.
#[derive(Debug, Clone)]
pub struct Reference {
    f: SimilarityFn,
    dim: usize,
    points: Vec<Prepared>,
}

impl Reference {
    pub fn new(f: &SimilarityFn, points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        let points = points
            .par_iter()
            .map(|p| {
                check_dim(dim, p.len())?;
                f.prepare(p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { f: f.clone(), dim, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn similarity_fn(&self) -> &SimilarityFn {
        &self.f
    }

    /// Similarities of `x` to every reference point, or `None` when `x` has a
    /// non-finite coordinate (a diverged generation matches nothing).
    pub fn similarities(&self, x: &[f64]) -> Result<Option<Vec<f64>>> {
        if !self.is_empty() {
            check_dim(self.dim, x.len())?;
        }
        if !all_finite(x) {
            return Ok(None);
        }
        let q = self.f.prepare(x)?;
        self.points.iter().map(|p| self.f.pair(&q, p)).collect::<Result<Vec<_>>>().map(Some)
    }

    /// Largest similarity to the reference set; `-inf` when empty or when `x`
    /// is not finite.
    pub fn max_similarity(&self, x: &[f64]) -> Result<f64> {
        Ok(self.similarities(x)?.map_or(f64::NEG_INFINITY, |s| s.into_iter().fold(f64::NEG_INFINITY, f64::max)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos() -> SimilarityFn {
        SimilarityFn::CosineFeature { features: FeatureMap::identity(false) }
    }

    #[test]
    fn identity_cases() {
        let a = [0.3, -1.2, 4.0];
        assert_eq!(similarity(&SimilarityFn::NegNormalizedL2, &a, &a).unwrap(), 1.0);
        assert_eq!(similarity(&cos(), &a, &a).unwrap(), 1.0);
    }

    #[test]
    fn normalized_l2_hand_value() {
        // delta = 3 / (1 + 0 + 3) = 0.75
        let s = similarity(&SimilarityFn::NegNormalizedL2, &[0.0], &[3.0]).unwrap();
        assert!((s - 1.0 / 1.75).abs() < 1e-15);
        assert!((s - 0.571_428_571_428_571_4).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_vectors_and_is_bounded() {
        assert!(matches!(similarity(&cos(), &[0.0, 0.0], &[1.0, 0.0]), Err(Error::UndefinedSimilarity)));
        assert_eq!(similarity(&cos(), &[1.0, 0.0], &[-2.0, 0.0]).unwrap(), -1.0);
        assert!(similarity(&cos(), &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn diverged_queries_match_nothing() {
        let r = Reference::new(&SimilarityFn::NegNormalizedL2, &[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(r.max_similarity(&[f64::NAN]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(r.max_similarity(&[1.0]).unwrap(), 1.0);
    }

    proptest::proptest! {
        #[test]
        fn symmetric_and_in_range(a in proptest::collection::vec(-10.0f64..10.0, 3), b in proptest::collection::vec(-10.0f64..10.0, 3)) {
            let l = similarity(&SimilarityFn::NegNormalizedL2, &a, &b).unwrap();
            proptest::prop_assert_eq!(l, similarity(&SimilarityFn::NegNormalizedL2, &b, &a).unwrap());
            proptest::prop_assert!(l > 0.0 && l <= 1.0);
            if norm(&a) > 0.0 && norm(&b) > 0.0 {
                let c = similarity(&cos(), &a, &b).unwrap();
                proptest::prop_assert!((c - similarity(&cos(), &b, &a).unwrap()).abs() < 1e-15);
                proptest::prop_assert!((-1.0..=1.0).contains(&c));
            }
        }
    }
}
