use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{reverse_sample_with, ConditionalScore, NoiseSchedule, SamplerKind};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, stream};
use crate::{LabeledSample, Sample};

pub const DEFAULT_VAR_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonPair {
    pub trigger: usize,
    pub target: Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poisoned {
    pub data: Vec<LabeledSample>,
    pub poisoned_fraction: f64,
}

/// Append one sample per pair, labelled with its trigger id.
pub fn poison_dataset(clean: &[LabeledSample], pairs: &[PoisonPair]) -> Result<Poisoned> {
    let labels: BTreeSet<usize> = clean.iter().map(|s| s.label).collect();
    let mut seen = BTreeSet::new();
    for p in pairs {
        if !seen.insert(p.trigger) {
            return Err(invalid(format!("duplicate trigger id {}", p.trigger)));
        }
        if labels.contains(&p.trigger) {
            return Err(invalid(format!("trigger id {} collides with a clean label", p.trigger)));
        }
        if let Some(first) = clean.first() {
            crate::error::check_dim(first.x.len(), p.target.len())?;
        }
    }
    let mut data = clean.to_vec();
    data.extend(pairs.iter().map(|p| LabeledSample::new(p.target.clone(), p.trigger)));
    let poisoned_fraction = if data.is_empty() { 0.0 } else { pairs.len() as f64 / data.len() as f64 };
    Ok(Poisoned { data, poisoned_fraction })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorResult {
    pub trigger: usize,
    pub mean: Sample,
    /// Mean over coordinates of the per-coordinate sample variance.
    pub variance: f64,
    pub accepted: bool,
}

/// For each trigger, draw `n_g` conditional samples and accept the mean as a
/// reconstruction when the spread is below `tau_var` (strictly).
pub fn backdoor_extract(
    model: &dyn ConditionalScore,
    triggers: &[usize],
    n_g: usize,
    tau_var: f64,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<BackdoorResult>> {
    if n_g < 2 {
        return Err(invalid("need at least two samples per trigger for a variance"));
    }
    let dim = model.dim();
    triggers
        .iter()
        .map(|&s| {
            if !model.has_condition(s) {
                return Err(Error::MissingCondition(s));
            }
            let tseed = derive_seed(seed, &format!("trigger-{s}"));
            let xs = (0..n_g)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream(tseed, i as u64);
                    reverse_sample_with(dim, schedule, SamplerKind::EulerMaruyama, &mut rng, |x, t| model.conditional_score(x, t, s), |_| {})
                })
                .collect::<Result<Vec<Sample>>>()?;
            let mean = crate::linalg::mean(&xs);
            let variance = (0..dim)
                .map(|j| xs.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / (n_g - 1) as f64)
                .sum::<f64>()
                / dim as f64;
            Ok(BackdoorResult { trigger: s, mean, variance, accepted: variance < tau_var })
        })
        .collect()
}
