use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Adam, AdapterView, Mlp};
use super::TrainConfig;
use crate::diffusion::{forward_sample, ConditionalScore, NoiseSchedule, ScoreModel};
use crate::error::{check_dim, invalid, Error, Result};
use crate::rng::{standard_normal, stream};
use crate::{LabeledSample, Sample};

/// Noise-prediction network `eps(x_t, t)`; the score is `-eps / sqrt(1 - ab)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreNet {
    mlp: Mlp,
    schedule: NoiseSchedule,
    loss_curve: Vec<f64>,
}

fn eps_to_score(eps: Vec<f64>, t: f64, schedule: &NoiseSchedule) -> Result<Sample> {
    let s = (1.0 - schedule.alpha_bar_at(t)).sqrt();
    if !(s > 0.0) {
        return Err(Error::Singularity { t });
    }
    Ok(eps.into_iter().map(|e| -e / s).collect())
}

/// Draw `(x_t, t, eps)` for one clean sample.
fn noisy_triplet<R: Rng + ?Sized>(x0: &[f64], schedule: &NoiseSchedule, rng: &mut R) -> Result<(Sample, f64, Sample)> {
    let t = rng.random::<f64>();
    let eps = standard_normal(rng, x0.len());
    let xt = forward_sample(x0, t, &eps, schedule)?;
    Ok((xt, t, eps))
}

impl ScoreNet {
    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn loss_curve(&self) -> &[f64] {
        &self.loss_curve
    }

    pub fn predict_noise(&self, x: &[f64], t: f64) -> Result<Sample> {
        self.mlp.forward(x, t)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&super::checkpoint::Versioned::new("score_net", self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        super::checkpoint::Versioned::parse("score_net", s)
    }
}

impl ScoreModel for ScoreNet {
    fn dim(&self) -> usize {
        self.mlp.input_dim()
    }

    fn score(&self, x: &[f64], t: f64) -> Result<Sample> {
        eps_to_score(self.predict_noise(x, t)?, t, &self.schedule)
    }
}

/// Train an unconditional noise-prediction network on clean samples with
/// the standard denoising objective `E ||eps - eps_theta(x_t, t)||^2`.
pub fn train_score_net(data: &[Sample], schedule: &NoiseSchedule, cfg: &TrainConfig) -> Result<ScoreNet> {
    let dim = data.first().ok_or_else(|| invalid("empty training set"))?.len();
    for x in data {
        check_dim(dim, x.len())?;
    }
    let mut mlp = Mlp::new(dim, &cfg.hidden, dim, 1e-1, &mut stream(cfg.seed, u64::MAX))?;
    mlp.normalize_to(data)?;
    let mut opt = Adam::new(mlp.num_params(), cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = vec![0.0; mlp.num_params()];
            for &i in chunk {
                let (xt, t, eps) = noisy_triplet(&data[i], schedule, &mut rng)?;
                let tr = mlp.trace(&xt, t, None)?;
                let (loss, g) = mse_grad(&tr.output, &eps);
                total += loss;
                let gp = mlp.backward(&tr, &g, None, true)?.params.expect("param grad");
                crate::linalg::axpy(1.0 / chunk.len() as f64, &gp, &mut grad);
            }
            opt.step(mlp.params_mut(), &grad);
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        loss_curve.push(mean);
    }
    Ok(ScoreNet { mlp, schedule: schedule.clone(), loss_curve })
}

/// `||eps_hat - eps||^2 / d` and its gradient.
fn mse_grad(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let d = pred.len() as f64;
    let diff: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|v| v * v).sum::<f64>() / d;
    (loss, diff.into_iter().map(|v| 2.0 * v / d).collect())
}

/// Frozen score network with trainable low-rank deltas `A B^T` on every
/// hidden linear layer and a class-embedding table whose row for `y` is added
/// to the first hidden pre-activation.
///
/// `A` starts random and `B` and the embeddings start at zero, so a fresh
/// adapter reproduces the base network exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoraScoreNet {
    base: ScoreNet,
    rank: usize,
    num_classes: usize,
    adapter: Vec<f64>,
    layer_offsets: Vec<Option<usize>>,
    embedding_offset: usize,
    loss_curve: Vec<f64>,
}

impl LoraScoreNet {
    pub fn new(base: ScoreNet, rank: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(invalid("rank must be at least 1"));
        }
        if num_classes == 0 {
            return Err(invalid("need at least one class"));
        }
        let mlp = &base.mlp;
        let adapted = mlp.num_layers() - 1;
        if adapted == 0 {
            return Err(invalid("base network has no hidden layer to adapt"));
        }
        let max = (0..adapted)
            .map(|l| {
                let (fi, fo) = mlp.layer_shape(l);
                fi.min(fo)
            })
            .min()
            .unwrap();
        if rank > max {
            return Err(Error::InvalidRank { rank, max });
        }
        let mut rng = stream(seed, u64::MAX - 1);
        let mut adapter = Vec::new();
        let mut layer_offsets = vec![None; mlp.num_layers()];
        let a_scale = 1.0 / (rank as f64).sqrt();
        for (l, slot) in layer_offsets.iter_mut().enumerate().take(adapted) {
            let (fi, fo) = mlp.layer_shape(l);
            *slot = Some(adapter.len());
            adapter.extend(standard_normal(&mut rng, fo * rank).into_iter().map(|z| a_scale * z));
            adapter.extend(std::iter::repeat(0.0).take(fi * rank));
        }
        let embedding_offset = adapter.len();
        let first_hidden = mlp.layer_shape(0).1;
        adapter.extend(std::iter::repeat(0.0).take(num_classes * first_hidden));
        Ok(Self { base, rank, num_classes, adapter, layer_offsets, embedding_offset, loss_curve: Vec::new() })
    }

    pub fn base(&self) -> &ScoreNet {
        &self.base
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn loss_curve(&self) -> &[f64] {
        &self.loss_curve
    }

    /// `sum r (fan_in + fan_out)` over adapted layers.
    pub fn lowrank_param_count(&self) -> usize {
        self.embedding_offset
    }

    pub fn embedding_param_count(&self) -> usize {
        self.adapter.len() - self.embedding_offset
    }

    pub fn adapter_params(&self) -> &[f64] {
        &self.adapter
    }

    fn view(&self, class: usize) -> AdapterView<'_> {
        let width = self.base.mlp.layer_shape(0).1;
        AdapterView {
            rank: self.rank,
            params: &self.adapter,
            layer_offsets: &self.layer_offsets,
            first_bias_offset: Some(self.embedding_offset + class * width),
        }
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class < self.num_classes {
            Ok(())
        } else {
            Err(Error::MissingCondition(class))
        }
    }

    pub fn conditional_noise(&self, x: &[f64], t: f64, class: usize) -> Result<Sample> {
        self.check_class(class)?;
        Ok(self.base.mlp.trace(x, t, Some(&self.view(class)))?.output)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&super::checkpoint::Versioned::new("lora_score_net", self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        super::checkpoint::Versioned::parse("lora_score_net", s)
    }
}

impl ScoreModel for LoraScoreNet {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Unconditional score: the frozen base network.
    fn score(&self, x: &[f64], t: f64) -> Result<Sample> {
        self.base.score(x, t)
    }
}

impl ConditionalScore for LoraScoreNet {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn has_condition(&self, condition: usize) -> bool {
        condition < self.num_classes
    }

    fn conditional_score(&self, x: &[f64], t: f64, condition: usize) -> Result<Sample> {
        eps_to_score(self.conditional_noise(x, t, condition)?, t, &self.base.schedule)
    }
}

/// Attach rank-`rank` adapters to `base` and fit them (plus the class
/// embeddings) on the conditional denoising objective
/// `E ||eps - eps_{theta + delta}(x_t, t, y)||^2`. The base stays frozen.
pub fn lora_finetune(
    base: &ScoreNet,
    data: &[LabeledSample],
    schedule: &NoiseSchedule,
    rank: usize,
    cfg: &TrainConfig,
) -> Result<LoraScoreNet> {
    let num_classes = data.iter().map(|s| s.label).max().ok_or_else(|| invalid("empty training set"))? + 1;
    let net = LoraScoreNet::new(base.clone(), rank, num_classes, cfg.seed)?;
    continue_finetune(net, data, schedule, cfg)
}

/// Run `cfg.epochs` further epochs of adapter training.
pub fn continue_finetune(
    mut net: LoraScoreNet,
    data: &[LabeledSample],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<LoraScoreNet> {
    for s in data {
        check_dim(net.base.dim(), s.x.len())?;
        net.check_class(s.label)?;
    }
    let frozen = net.base.mlp.digest();
    let mut opt = Adam::new(net.adapter.len(), cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let start = net.loss_curve.len();
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, (start + epoch) as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut grad = vec![0.0; net.adapter.len()];
            for &i in chunk {
                let s = &data[i];
                let (xt, t, eps) = noisy_triplet(&s.x, schedule, &mut rng)?;
                let view = net.view(s.label);
                let tr = net.base.mlp.trace(&xt, t, Some(&view))?;
                let (loss, g) = mse_grad(&tr.output, &eps);
                total += loss;
                let ga = net.base.mlp.backward(&tr, &g, Some(&view), false)?.adapter.expect("adapter grad");
                crate::linalg::axpy(1.0 / chunk.len() as f64, &ga, &mut grad);
            }
            opt.step(&mut net.adapter, &grad);
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::TrainingDiverged { epoch: start + epoch });
        }
        net.loss_curve.push(mean);
    }
    assert_eq!(frozen, net.base.mlp.digest(), "base weights changed during adapter training");
    Ok(net)
}
