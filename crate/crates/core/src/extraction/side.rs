use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{reverse_sample_with, ConditionalScore, GuidanceSpec, NoiseSchedule, SamplerKind, ScoreModel};
use crate::error::{invalid, Error, Result};
use crate::neural::TimeClassifier;
use crate::rng::{derive_seed, stream};
use crate::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    Classifier,
    Lora,
    Unconditional,
}

/// Where the conditional signal comes from.
#[derive(Clone, Copy)]
pub enum GuidanceSource<'a> {
    /// `score + lambda * grad log p_t(c | x)`.
    Classifier(&'a dyn TimeClassifier),
    /// The adapted network's own conditional score; `lambda` is not used.
    Lora(&'a dyn ConditionalScore),
}

impl GuidanceSource<'_> {
    fn mode(&self) -> GuidanceMode {
        match self {
            GuidanceSource::Classifier(_) => GuidanceMode::Classifier,
            GuidanceSource::Lora(_) => GuidanceMode::Lora,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub n_g: usize,
    pub lambda: f64,
    pub schedule: NoiseSchedule,
    #[serde(default)]
    pub sampler: SamplerKind,
    pub seed: u64,
    /// Pin every generation to this cluster instead of drawing it uniformly.
    #[serde(default)]
    pub fixed_target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub index: usize,
    pub cluster: Option<usize>,
    /// Sampling stream index under the run seed.
    pub stream: u64,
    /// All-NaN when the trajectory diverged.
    pub x0: Sample,
    pub diverged: bool,
    #[serde(default)]
    pub diverged_step: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRun {
    pub mode: GuidanceMode,
    pub n_g: usize,
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
    pub records: Vec<ExtractionRecord>,
}

impl ExtractionRun {
    pub fn samples(&self) -> Vec<Sample> {
        self.records.iter().map(|r| r.x0.clone()).collect()
    }

    pub fn diverged(&self) -> usize {
        self.records.iter().filter(|r| r.diverged).count()
    }
}

fn record(index: usize, cluster: Option<usize>, dim: usize, out: Result<Sample>) -> Result<ExtractionRecord> {
    let (x0, diverged_step) = match out {
        Ok(x) => (x, None),
        Err(Error::Diverged { step }) => (vec![f64::NAN; dim], Some(step)),
        Err(e) => return Err(e),
    };
    Ok(ExtractionRecord { index, cluster, stream: index as u64, x0, diverged: diverged_step.is_some(), diverged_step })
}

fn validate(cfg: &ExtractionConfig) -> Result<()> {
    if cfg.n_g == 0 {
        return Err(invalid("N_G must be positive"));
    }
    if !(cfg.lambda >= 0.0) || !cfg.lambda.is_finite() {
        return Err(invalid("guidance scale must be finite and nonnegative"));
    }
    Ok(())
}

/// Draw `n_g` generations, each steered toward a target cluster drawn
/// uniformly from `0..num_targets`.
///
/// Generation `i` samples from `stream(seed, i)`; targets come from a separate
/// stream, so at `lambda = 0` in classifier mode the outputs equal
/// [`unconditional_extract`] with the same seed.
pub fn side_extract(
    model: &dyn ScoreModel,
    source: GuidanceSource<'_>,
    num_targets: usize,
    cfg: &ExtractionConfig,
) -> Result<ExtractionRun> {
    validate(cfg)?;
    if num_targets == 0 {
        return Err(Error::NoSurvivingCluster { tau: f64::NAN });
    }
    match source {
        GuidanceSource::Classifier(c) if c.num_classes() < num_targets => {
            return Err(invalid(format!("classifier has {} classes, {num_targets} targets requested", c.num_classes())));
        }
        GuidanceSource::Lora(l) if (0..num_targets).any(|c| !l.has_condition(c)) => {
            return Err(invalid("conditional model lacks some target clusters"));
        }
        _ => {}
    }
    if let Some(c) = cfg.fixed_target {
        if c >= num_targets {
            return Err(invalid(format!("fixed target {c} out of range")));
        }
    }
    let dim = model.dim();
    let target_seed = derive_seed(cfg.seed, "targets");
    let records = (0..cfg.n_g)
        .into_par_iter()
        .map(|i| {
            let c = cfg.fixed_target.unwrap_or_else(|| stream(target_seed, i as u64).random_range(0..num_targets));
            let mut rng = stream(cfg.seed, i as u64);
            let out = match source {
                GuidanceSource::Classifier(clf) => {
                    let g = GuidanceSpec::new(clf, c, cfg.lambda)?;
                    reverse_sample_with(dim, &cfg.schedule, cfg.sampler, &mut rng, |x, t| g.guide(model.score(x, t)?, x, t), |_| {})
                }
                GuidanceSource::Lora(l) => {
                    reverse_sample_with(dim, &cfg.schedule, cfg.sampler, &mut rng, |x, t| l.conditional_score(x, t, c), |_| {})
                }
            };
            record(i, Some(c), dim, out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExtractionRun { mode: source.mode(), n_g: cfg.n_g, lambda: cfg.lambda, steps: cfg.schedule.steps(), seed: cfg.seed, records })
}

/// Unguided generations: the plain-sampling baseline.
pub fn unconditional_extract(model: &dyn ScoreModel, cfg: &ExtractionConfig) -> Result<ExtractionRun> {
    validate(cfg)?;
    let dim = model.dim();
    let records = (0..cfg.n_g)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, i as u64);
            let out = reverse_sample_with(dim, &cfg.schedule, cfg.sampler, &mut rng, |x, t| model.score(x, t), |_| {});
            record(i, None, dim, out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExtractionRun { mode: GuidanceMode::Unconditional, n_g: cfg.n_g, lambda: 0.0, steps: cfg.schedule.steps(), seed: cfg.seed, records })
}
