use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{IsotropicMixture, NoiseSchedule, ScoreModel};
use crate::error::{invalid, Error, Result};
use crate::rng::{standard_normal, stream};
use crate::Sample;

pub const DEFAULT_MC_SAMPLES: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceEstimate {
    /// Nats.
    pub value: f64,
    pub eps: f64,
    pub samples: usize,
    /// Sample standard deviation of the integrand over `sqrt(samples)`.
    pub std_err: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub gap: f64,
    /// Standard error of the paired difference.
    pub std_err: f64,
    pub subset: DivergenceEstimate,
    pub full: DivergenceEstimate,
}

/// The data smoothed by `N(0, eps^2 I)`: a uniform Gaussian mixture on `data`.
fn smoothed(data: &[Sample], eps: f64) -> Result<IsotropicMixture> {
    if !(eps > 0.0) {
        return Err(invalid("smoothing scale must be positive"));
    }
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    IsotropicMixture::new(data, &vec![1.0; data.len()], eps * eps, NoiseSchedule::new(1, 0.1, 20.0)?)
}

/// `log q_eps(x)` for the smoothed empirical distribution of `data`.
pub fn smoothed_log_density(data: &[Sample], eps: f64, x: &[f64]) -> Result<f64> {
    smoothed(data, eps)?.evaluate(x, 0.0, false).map(|r| r.0)
}

fn mean_and_err(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Draw `samples` points from `q_eps` and return `(log q_eps(x), x)` pairs.
fn draws(data: &[Sample], eps: f64, samples: usize, seed: u64) -> Result<Vec<(f64, Sample)>> {
    if samples == 0 {
        return Err(invalid("need at least one Monte-Carlo sample"));
    }
    let q = smoothed(data, eps)?;
    (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream(seed, s as u64);
            let j = rng.random_range(0..data.len());
            let z = standard_normal(&mut rng, q.dim());
            let x: Sample = data[j].iter().zip(&z).map(|(a, b)| a + eps * b).collect();
            Ok((q.evaluate(&x, 0.0, false)?.0, x))
        })
        .collect()
}

fn ensure_density(model: &dyn ScoreModel) -> Result<()> {
    if model.has_density() {
        Ok(())
    } else {
        Err(Error::UnsupportedModel("memorization divergence needs a tractable density"))
    }
}

/// Monte-Carlo estimate of `KL(q_eps || p_theta)` where `q_eps` is the
/// training set smoothed by `N(0, eps^2 I)` and `p_theta` is the model density
/// at `t = 0`.
pub fn memorization_divergence(
    data: &[Sample],
    model: &dyn ScoreModel,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<DivergenceEstimate> {
    ensure_density(model)?;
    let terms = draws(data, eps, samples, seed)?
        .into_par_iter()
        .map(|(lq, x)| Ok(lq - model.log_density(&x, 0.0)?))
        .collect::<Result<Vec<f64>>>()?;
    let (value, std_err) = mean_and_err(&terms);
    Ok(DivergenceEstimate { value, eps, samples, std_err })
}

/// `M(D_i; p_i, eps) - M(D_i; p, eps)` from one shared set of draws, so the
/// `log q_eps` terms cancel and the error bar is that of the paired difference.
pub fn theorem_gap(
    subset: &[Sample],
    model_subset: &dyn ScoreModel,
    model_full: &dyn ScoreModel,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GapEstimate> {
    ensure_density(model_subset)?;
    ensure_density(model_full)?;
    let rows = draws(subset, eps, samples, seed)?
        .into_par_iter()
        .map(|(lq, x)| Ok((lq, model_subset.log_density(&x, 0.0)?, model_full.log_density(&x, 0.0)?)))
        .collect::<Result<Vec<(f64, f64, f64)>>>()?;
    let a: Vec<f64> = rows.iter().map(|r| r.0 - r.1).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.0 - r.2).collect();
    let d: Vec<f64> = rows.iter().map(|r| r.2 - r.1).collect();
    let (va, ea) = mean_and_err(&a);
    let (vb, eb) = mean_and_err(&b);
    let (gap, std_err) = mean_and_err(&d);
    Ok(GapEstimate {
        gap,
        std_err,
        subset: DivergenceEstimate { value: va, eps, samples, std_err: ea },
        full: DivergenceEstimate { value: vb, eps, samples, std_err: eb },
    })
}
