use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::NoiseSchedule;
use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::log_sum_exp;
use crate::{LabeledSample, Sample};

/// Source of `grad_x log p_t(x)`, optionally with the density itself.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    fn score(&self, x: &[f64], t: f64) -> Result<Sample>;

    fn log_density(&self, _x: &[f64], _t: f64) -> Result<f64> {
        Err(Error::UnsupportedModel("no closed-form density"))
    }

    fn has_density(&self) -> bool {
        false
    }

    fn score_and_log_density(&self, x: &[f64], t: f64) -> Result<(Sample, f64)> {
        Ok((self.score(x, t)?, self.log_density(x, t)?))
    }
}

/// Score of a model conditioned on an integer label (cluster id or trigger).
pub trait ConditionalScore: Send + Sync {
    fn dim(&self) -> usize;
    fn has_condition(&self, condition: usize) -> bool;
    fn conditional_score(&self, x: &[f64], t: f64, condition: usize) -> Result<Sample>;
}

/// Weighted mixture of isotropic Gaussians pushed through the VP forward
/// marginal: component `i` at time `t` is
/// `N(sqrt(ab) c_i, (1 - ab + ab * base_var) I)`.
///
/// Both the kernel (empirical) model and the GMM are instances; the kernel
/// model has uniform weights and `base_var = eps0^2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IsotropicMixture {
    dim: usize,
    centers: Vec<f64>,
    log_weights: Vec<f64>,
    base_var: f64,
    schedule: NoiseSchedule,
}

impl IsotropicMixture {
    pub fn new(
        centers: &[Sample],
        weights: &[f64],
        base_var: f64,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        let dim = centers.first().ok_or_else(|| invalid("mixture needs at least one component"))?.len();
        if dim == 0 {
            return Err(invalid("zero-dimensional samples"));
        }
        if weights.len() != centers.len() {
            return Err(invalid("one weight per component required"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("mixture weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(invalid("mixture weights sum to zero"));
        }
        if !(base_var >= 0.0) || !base_var.is_finite() {
            return Err(invalid("base variance must be finite and nonnegative"));
        }
        let mut flat = Vec::with_capacity(dim * centers.len());
        for c in centers {
            check_dim(dim, c.len())?;
            if c.iter().any(|v| !v.is_finite()) {
                return Err(invalid("non-finite mixture center"));
            }
            flat.extend_from_slice(c);
        }
        let log_weights = weights.iter().map(|w| (w / total).ln()).collect();
        Ok(Self { dim, centers: flat, log_weights, base_var, schedule })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.log_weights[i].exp()
    }

    pub fn base_var(&self) -> f64 {
        self.base_var
    }

    /// Per-component variance at diffusion time `t`.
    pub fn variance_at(&self, t: f64) -> Result<f64> {
        let ab = self.schedule.alpha_bar_at(t);
        let v = 1.0 - ab + ab * self.base_var;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(Error::Singularity { t })
        }
    }

    /// Log-density and score in a single pass over the components.
    pub fn evaluate(&self, x: &[f64], t: f64, want_score: bool) -> Result<(f64, Option<Sample>)> {
        check_dim(self.dim, x.len())?;
        let v = self.variance_at(t)?;
        let a = self.schedule.alpha_bar_at(t).sqrt();
        let inv2v = 0.5 / v;
        let mut logits = Vec::with_capacity(self.len());
        let mut max = f64::NEG_INFINITY;
        for (c, lw) in self.centers.chunks_exact(self.dim).zip(&self.log_weights) {
            let mut d2 = 0.0;
            for (xi, ci) in x.iter().zip(c) {
                let diff = xi - a * ci;
                d2 += diff * diff;
            }
            let l = lw - d2 * inv2v;
            max = max.max(l);
            logits.push(l);
        }
        let mut total = 0.0;
        let mut mean = if want_score { vec![0.0; self.dim] } else { Vec::new() };
        for (l, c) in logits.iter().zip(self.centers.chunks_exact(self.dim)) {
            let w = (l - max).exp();
            if w == 0.0 {
                continue;
            }
            total += w;
            if want_score {
                for (m, ci) in mean.iter_mut().zip(c) {
                    *m += w * ci;
                }
            }
        }
        let log_norm = -0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * v).ln();
        let logp = max + total.ln() + log_norm;
        let score = want_score.then(|| {
            mean.iter()
                .zip(x)
                .map(|(m, xi)| (a * m / total - xi) / v)
                .collect()
        });
        Ok((logp, score))
    }

    /// Posterior responsibilities of each component given `x` at time `t`.
    pub fn responsibilities(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let v = self.variance_at(t)?;
        let a = self.schedule.alpha_bar_at(t).sqrt();
        let mut logits: Vec<f64> = self
            .centers
            .chunks_exact(self.dim)
            .zip(&self.log_weights)
            .map(|(c, lw)| {
                let d2: f64 = x.iter().zip(c).map(|(xi, ci)| (xi - a * ci).powi(2)).sum();
                lw - d2 / (2.0 * v)
            })
            .collect();
        let lse = log_sum_exp(&logits);
        logits.iter_mut().for_each(|l| *l = (*l - lse).exp());
        Ok(logits)
    }
}

impl ScoreModel for IsotropicMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Sample> {
        Ok(self.evaluate(x, t, true)?.1.expect("score requested"))
    }

    fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        Ok(self.evaluate(x, t, false)?.0)
    }

    fn has_density(&self) -> bool {
        true
    }

    fn score_and_log_density(&self, x: &[f64], t: f64) -> Result<(Sample, f64)> {
        let (lp, s) = self.evaluate(x, t, true)?;
        Ok((s.expect("score requested"), lp))
    }
}

/// The exactly-memorising model: a uniform mixture of Gaussians of width
/// `eps0` centred on the training points, diffused by the forward process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelScoreModel {
    mixture: IsotropicMixture,
    bandwidth: f64,
}

impl KernelScoreModel {
    pub const DEFAULT_BANDWIDTH: f64 = 0.05;

    pub fn new(train_points: &[Sample], bandwidth: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(bandwidth >= 0.0) {
            return Err(invalid("bandwidth must be nonnegative"));
        }
        let weights = vec![1.0; train_points.len()];
        let mixture = IsotropicMixture::new(train_points, &weights, bandwidth * bandwidth, schedule)?;
        Ok(Self { mixture, bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn train_points(&self) -> Vec<Sample> {
        (0..self.mixture.len()).map(|i| self.mixture.center(i).to_vec()).collect()
    }

    pub fn num_points(&self) -> usize {
        self.mixture.len()
    }

    pub fn mixture(&self) -> &IsotropicMixture {
        &self.mixture
    }
}

impl ScoreModel for KernelScoreModel {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }
    fn score(&self, x: &[f64], t: f64) -> Result<Sample> {
        self.mixture.score(x, t)
    }
    fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        self.mixture.log_density(x, t)
    }
    fn has_density(&self) -> bool {
        true
    }
    fn score_and_log_density(&self, x: &[f64], t: f64) -> Result<(Sample, f64)> {
        self.mixture.score_and_log_density(x, t)
    }
}

/// Gaussian mixture with a shared isotropic variance; its diffused density is
/// again a Gaussian mixture, so score and density stay exact for every `t`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GmmScoreModel {
    mixture: IsotropicMixture,
    sigma: f64,
}

impl GmmScoreModel {
    pub fn new(weights: &[f64], means: &[Sample], sigma: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(invalid("sigma must be nonnegative"));
        }
        let mixture = IsotropicMixture::new(means, weights, sigma * sigma, schedule)?;
        Ok(Self { mixture, sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn num_components(&self) -> usize {
        self.mixture.len()
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.mixture.weight(k)
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        self.mixture.center(k)
    }

    pub fn mixture(&self) -> &IsotropicMixture {
        &self.mixture
    }

    /// Draw `n` i.i.d. samples from the clean (t = 0) mixture.
    pub fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Sample> {
        let weights: Vec<f64> = (0..self.num_components()).map(|k| self.weight(k)).collect();
        (0..n)
            .map(|_| {
                let k = pick(rng, &weights);
                let z = crate::rng::standard_normal(rng, self.mixture.dim());
                self.mean(k).iter().zip(z).map(|(m, zi)| m + self.sigma * zi).collect()
            })
            .collect()
    }
}

pub(crate) fn pick<R: rand::Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.len() - 1
}

impl ScoreModel for GmmScoreModel {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }
    fn score(&self, x: &[f64], t: f64) -> Result<Sample> {
        self.mixture.score(x, t)
    }
    fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        self.mixture.log_density(x, t)
    }
    fn has_density(&self) -> bool {
        true
    }
    fn score_and_log_density(&self, x: &[f64], t: f64) -> Result<(Sample, f64)> {
        self.mixture.score_and_log_density(x, t)
    }
}

/// Convex combination of tractable models, e.g. a memorising kernel
/// component plus a diffuse generalising component.
#[derive(Clone)]
pub struct BlendScoreModel {
    parts: Vec<(f64, Arc<dyn ScoreModel>)>,
    dim: usize,
}

impl std::fmt::Debug for BlendScoreModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlendScoreModel")
            .field("weights", &self.parts.iter().map(|(w, _)| w.exp()).collect::<Vec<_>>())
            .field("dim", &self.dim)
            .finish()
    }
}

impl BlendScoreModel {
    pub fn new(parts: Vec<(f64, Arc<dyn ScoreModel>)>) -> Result<Self> {
        let dim = parts.first().ok_or_else(|| invalid("blend needs at least one part"))?.1.dim();
        let total: f64 = parts.iter().map(|(w, _)| *w).sum();
        if parts.iter().any(|(w, _)| !(*w >= 0.0)) || !(total > 0.0) {
            return Err(invalid("blend weights must be nonnegative with positive sum"));
        }
        for (_, m) in &parts {
            check_dim(dim, m.dim())?;
            if !m.has_density() {
                return Err(Error::UnsupportedModel("blend parts need tractable densities"));
            }
        }
        let parts = parts.into_iter().map(|(w, m)| ((w / total).ln(), m)).collect();
        Ok(Self { parts, dim })
    }
}

impl ScoreModel for BlendScoreModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Sample> {
        Ok(self.score_and_log_density(x, t)?.0)
    }

    fn log_density(&self, x: &[f64], t: f64) -> Result<f64> {
        let lps = self
            .parts
            .iter()
            .map(|(lw, m)| Ok(lw + m.log_density(x, t)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(log_sum_exp(&lps))
    }

    fn has_density(&self) -> bool {
        true
    }

    fn score_and_log_density(&self, x: &[f64], t: f64) -> Result<(Sample, f64)> {
        let mut lps = Vec::with_capacity(self.parts.len());
        let mut scores = Vec::with_capacity(self.parts.len());
        for (lw, m) in &self.parts {
            let (s, lp) = m.score_and_log_density(x, t)?;
            lps.push(lw + lp);
            scores.push(s);
        }
        let lse = log_sum_exp(&lps);
        let mut out = vec![0.0; self.dim];
        for (lp, s) in lps.iter().zip(&scores) {
            let r = (lp - lse).exp();
            for (o, si) in out.iter_mut().zip(s) {
                *o += r * si;
            }
        }
        Ok((out, lse))
    }
}

/// One kernel model per condition; the ground-truth conditional sampler for
/// labelled (possibly poisoned) data.
#[derive(Debug, Clone)]
pub struct ConditionalKernelModel {
    per_condition: BTreeMap<usize, KernelScoreModel>,
    dim: usize,
}

impl ConditionalKernelModel {
    pub fn fit(data: &[LabeledSample], bandwidth: f64, schedule: NoiseSchedule) -> Result<Self> {
        let dim = data.first().ok_or_else(|| invalid("empty labelled dataset"))?.x.len();
        let mut groups: BTreeMap<usize, Vec<Sample>> = BTreeMap::new();
        for s in data {
            check_dim(dim, s.x.len())?;
            groups.entry(s.label).or_default().push(s.x.clone());
        }
        let per_condition = groups
            .into_iter()
            .map(|(label, pts)| Ok((label, KernelScoreModel::new(&pts, bandwidth, schedule.clone())?)))
            .collect::<Result<_>>()?;
        Ok(Self { per_condition, dim })
    }

    pub fn conditions(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_condition.keys().copied()
    }

    pub fn model(&self, condition: usize) -> Result<&KernelScoreModel> {
        self.per_condition.get(&condition).ok_or(Error::MissingCondition(condition))
    }
}

impl ConditionalScore for ConditionalKernelModel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn has_condition(&self, condition: usize) -> bool {
        self.per_condition.contains_key(&condition)
    }
    fn conditional_score(&self, x: &[f64], t: f64, condition: usize) -> Result<Sample> {
        self.model(condition)?.score(x, t)
    }
}
