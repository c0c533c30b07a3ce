use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::similarity::{Reference, SimilarityFn};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchBand {
    pub lo: f64,
    pub hi: f64,
}

impl MatchBand {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(invalid(format!("band [{lo}, {hi}] is empty or malformed")));
        }
        Ok(Self { lo, hi })
    }

    /// `[lo, hi)`, or `[lo, hi]` when `hi >= 1`.
    pub fn contains(&self, s: f64) -> bool {
        s >= self.lo && (s < self.hi || (self.hi >= 1.0 && s <= self.hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedBand {
    pub name: String,
    #[serde(flatten)]
    pub band: MatchBand,
}

impl NamedBand {
    pub fn new(name: &str, lo: f64, hi: f64) -> Result<Self> {
        Ok(Self { name: name.to_string(), band: MatchBand::new(lo, hi)? })
    }
}

/// low `[0, 0.5)`, mid `[0.5, 0.6)`, high `[0.6, 1]`.
pub fn default_bands() -> Vec<NamedBand> {
    vec![
        NamedBand::new("low", 0.0, 0.5).unwrap(),
        NamedBand::new("mid", 0.5, 0.6).unwrap(),
        NamedBand::new("high", 0.6, 1.0).unwrap(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandScore {
    pub name: String,
    pub band: MatchBand,
    /// Generations whose best match lies in the band.
    pub matched: usize,
    /// Distinct training indices with an in-band similarity to some generation.
    pub unique: usize,
    pub ams: f64,
    pub ums: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n_g: usize,
    /// Best similarity of each generation to the training set.
    pub max_similarity: Vec<f64>,
    pub bands: Vec<BandScore>,
}

impl Evaluation {
    pub fn band(&self, name: &str) -> Option<&BandScore> {
        self.bands.iter().find(|b| b.name == name)
    }
}

struct Partial {
    matched: Vec<usize>,
    hit: Vec<Vec<bool>>,
}

impl Partial {
    fn empty(bands: usize, n: usize) -> Self {
        Self { matched: vec![0; bands], hit: vec![vec![false; n]; bands] }
    }

    fn merge(mut self, other: Self) -> Self {
        for (a, b) in self.matched.iter_mut().zip(other.matched) {
            *a += b;
        }
        for (a, b) in self.hit.iter_mut().zip(other.hit) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x |= y);
        }
        self
    }
}

/// Score every band in one pass over `generated x training`.
///
/// The denominator of both scores is `N_G = |generated|`.
pub fn evaluate(generated: &[Vec<f64>], training: &[Vec<f64>], bands: &[NamedBand], f: &SimilarityFn) -> Result<Evaluation> {
    if generated.is_empty() {
        return Err(invalid("no generated samples to score"));
    }
    let reference = Reference::new(f, training)?;
    let n = reference.len();
    let rows: Vec<(f64, Option<Vec<f64>>)> = generated
        .par_iter()
        .map(|x| {
            let sims = reference.similarities(x)?;
            let max = sims.as_ref().map_or(f64::NEG_INFINITY, |s| s.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            Ok((max, sims))
        })
        .collect::<Result<_>>()?;
    let partial = rows
        .par_iter()
        .fold(
            || Partial::empty(bands.len(), n),
            |mut acc, (max, sims)| {
                for (b, nb) in bands.iter().enumerate() {
                    if nb.band.contains(*max) {
                        acc.matched[b] += 1;
                    }
                    if let Some(s) = sims {
                        for (j, &v) in s.iter().enumerate() {
                            if nb.band.contains(v) {
                                acc.hit[b][j] = true;
                            }
                        }
                    }
                }
                acc
            },
        )
        .reduce(|| Partial::empty(bands.len(), n), Partial::merge);
    let n_g = generated.len();
    let scores = bands
        .iter()
        .enumerate()
        .map(|(b, nb)| {
            let unique = partial.hit[b].iter().filter(|h| **h).count();
            BandScore {
                name: nb.name.clone(),
                band: nb.band,
                matched: partial.matched[b],
                unique,
                ams: partial.matched[b] as f64 / n_g as f64,
                ums: unique as f64 / n_g as f64,
            }
        })
        .collect();
    Ok(Evaluation { n_g, max_similarity: rows.into_iter().map(|r| r.0).collect(), bands: scores })
}

/// 1 when the best match of `x` in `training` lies in `band`.
pub fn match_flag(x: &[f64], training: &[Vec<f64>], band: &MatchBand, f: &SimilarityFn) -> Result<bool> {
    Ok(band.contains(Reference::new(f, training)?.max_similarity(x)?))
}

/// Training indices whose own similarity to `x` lies in `band`.
pub fn match_set(x: &[f64], training: &[Vec<f64>], band: &MatchBand, f: &SimilarityFn) -> Result<Vec<usize>> {
    let sims = Reference::new(f, training)?.similarities(x)?.unwrap_or_default();
    Ok(sims.into_iter().enumerate().filter(|(_, s)| band.contains(*s)).map(|(j, _)| j).collect())
}

fn single(band: &MatchBand) -> [NamedBand; 1] {
    [NamedBand { name: String::new(), band: *band }]
}

pub fn ams(generated: &[Vec<f64>], training: &[Vec<f64>], band: &MatchBand, f: &SimilarityFn) -> Result<f64> {
    Ok(evaluate(generated, training, &single(band), f)?.bands[0].ams)
}

pub fn ums(generated: &[Vec<f64>], training: &[Vec<f64>], band: &MatchBand, f: &SimilarityFn) -> Result<f64> {
    Ok(evaluate(generated, training, &single(band), f)?.bands[0].ums)
}

/// `p`-th percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(invalid("percentile of an empty set"));
    }
    if !(p > 0.0 && p < 100.0) {
        return Err(invalid(format!("percentile {p} outside (0, 100)")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * p / 100.0;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 || lo + 1 == v.len() {
        return Ok(v[lo]);
    }
    Ok(v[lo] + frac * (v[lo + 1] - v[lo]))
}

/// Percentile of the best-match similarities of the generations.
pub fn percentile_similarity(generated: &[Vec<f64>], training: &[Vec<f64>], p: f64, f: &SimilarityFn) -> Result<f64> {
    if generated.is_empty() {
        return Err(invalid("no generated samples to score"));
    }
    let reference = Reference::new(f, training)?;
    let maxes = generated.par_iter().map(|x| reference.max_similarity(x)).collect::<Result<Vec<_>>>()?;
    percentile(&maxes, p)
}

/// Expected number of distinct items drawn when item `i` is hit by each of
/// `n_g` independent generations with probability `probs[i]`.
pub fn expected_unique(probs: &[f64], n_g: u64) -> f64 {
    let n = n_g.min(i32::MAX as u64) as i32;
    probs.iter().map(|&k| 1.0 - (1.0 - k).powi(n)).sum()
}
