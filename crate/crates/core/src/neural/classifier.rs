use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Adam, Mlp};
use crate::diffusion::{forward_sample, IsotropicMixture, NoiseSchedule};
use crate::error::{check_dim, invalid, Error, Result};
use crate::linalg::{log_softmax, log_sum_exp};
use crate::rng::{standard_normal, stream};
use crate::{LabeledSample, Sample};

/// A time-dependent classifier `p_t(y | x)` over `num_classes` labels.
pub trait TimeClassifier: Send + Sync {
    fn num_classes(&self) -> usize;

    /// `log p_t(y | x)` for every class.
    fn log_posterior(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;

    /// `grad_x log p_t(class | x)`.
    fn grad_log_posterior(&self, x: &[f64], t: f64, class: usize) -> Result<Sample>;
}

/// `grad_x log p_t(c | x)` with the class index validated.
pub fn classifier_grad(clf: &dyn TimeClassifier, x: &[f64], t: f64, c: usize) -> Result<Sample> {
    if c >= clf.num_classes() {
        return Err(invalid(format!("class {c} out of range for {} classes", clf.num_classes())));
    }
    clf.grad_log_posterior(x, t, c)
}

/// Exact posterior under per-class kernel models, with priors proportional
/// to class sizes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BayesTimeClassifier {
    classes: Vec<IsotropicMixture>,
    log_priors: Vec<f64>,
}

impl BayesTimeClassifier {
    pub fn fit(data: &[LabeledSample], num_classes: usize, bandwidth: f64, schedule: NoiseSchedule) -> Result<Self> {
        if num_classes == 0 {
            return Err(invalid("need at least one class"));
        }
        let mut groups: Vec<Vec<Sample>> = vec![Vec::new(); num_classes];
        for s in data {
            if s.label >= num_classes {
                return Err(invalid(format!("label {} out of range for {num_classes} classes", s.label)));
            }
            groups[s.label].push(s.x.clone());
        }
        if let Some(k) = groups.iter().position(Vec::is_empty) {
            return Err(invalid(format!("class {k} has no members")));
        }
        let total = data.len() as f64;
        let log_priors = groups.iter().map(|g| (g.len() as f64 / total).ln()).collect();
        let classes = groups
            .iter()
            .map(|g| IsotropicMixture::new(g, &vec![1.0; g.len()], bandwidth * bandwidth, schedule.clone()))
            .collect::<Result<_>>()?;
        Ok(Self { classes, log_priors })
    }

    pub fn prior(&self, k: usize) -> f64 {
        self.log_priors[k].exp()
    }

    pub fn class_model(&self, k: usize) -> &IsotropicMixture {
        &self.classes[k]
    }

    /// Normalised posterior probabilities.
    pub fn posterior(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        Ok(self.log_posterior(x, t)?.into_iter().map(f64::exp).collect())
    }
}

impl TimeClassifier for BayesTimeClassifier {
    fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn log_posterior(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut lj = self
            .classes
            .iter()
            .zip(&self.log_priors)
            .map(|(m, lp)| Ok(lp + m.evaluate(x, t, false)?.0))
            .collect::<Result<Vec<_>>>()?;
        log_softmax(&mut lj);
        Ok(lj)
    }

    /// `s_c(x) - sum_k p(k | x) s_k(x)` with `s_k` the class scores.
    fn grad_log_posterior(&self, x: &[f64], t: f64, class: usize) -> Result<Sample> {
        if class >= self.classes.len() {
            return Err(invalid(format!("class {class} out of range")));
        }
        let mut joint = Vec::with_capacity(self.classes.len());
        let mut scores = Vec::with_capacity(self.classes.len());
        for (m, lp) in self.classes.iter().zip(&self.log_priors) {
            let (l, s) = m.evaluate(x, t, true)?;
            joint.push(lp + l);
            scores.push(s.expect("score requested"));
        }
        let lse = log_sum_exp(&joint);
        let mut g = scores[class].clone();
        for (l, s) in joint.iter().zip(&scores) {
            let p = (l - lse).exp();
            for (gi, si) in g.iter_mut().zip(s) {
                *gi -= p * si;
            }
        }
        Ok(g)
    }
}

/// Optimisation settings shared by the classifier and score-network trainers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 1e-4, batch_size: 64, hidden: vec![64, 64], seed: 0 }
    }
}

/// MLP classifier on `(x_t, t)` trained with noisy cross-entropy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuralTimeClassifier {
    mlp: Mlp,
    schedule: NoiseSchedule,
    trained: bool,
    loss_curve: Vec<f64>,
}

impl NeuralTimeClassifier {
    pub fn untrained(mlp: Mlp, schedule: NoiseSchedule) -> Self {
        Self { mlp, schedule, trained: false, loss_curve: Vec::new() }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Mean cross-entropy per epoch.
    pub fn loss_curve(&self) -> &[f64] {
        &self.loss_curve
    }

    pub fn logits(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.mlp.forward(x, t)
    }

    /// Index of the most probable class.
    pub fn predict(&self, x: &[f64], t: f64) -> Result<usize> {
        let l = self.logits(x, t)?;
        Ok(argmax(&l))
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::NotTrained)
        }
    }

    /// Cross-entropy of a fresh noisy batch drawn like a training batch.
    pub fn noisy_loss<R: Rng + ?Sized>(&self, data: &[LabeledSample], rng: &mut R) -> Result<f64> {
        let mut total = 0.0;
        for s in data {
            let t = rng.random::<f64>();
            let z = standard_normal(rng, s.x.len());
            let xt = forward_sample(&s.x, t, &z, &self.schedule)?;
            let mut lp = self.logits(&xt, t)?;
            log_softmax(&mut lp);
            total -= lp[s.label];
        }
        Ok(total / data.len() as f64)
    }

    /// Continue training for `epochs` more epochs with a fresh optimiser.
    pub fn train_more(&mut self, data: &[LabeledSample], cfg: &TrainConfig, epochs: usize, stream_offset: u64) -> Result<()> {
        for s in data {
            check_dim(self.mlp.input_dim(), s.x.len())?;
            if s.label >= self.mlp.output_dim() {
                return Err(invalid(format!("label {} out of range", s.label)));
            }
        }
        let mut opt = Adam::new(self.mlp.num_params(), cfg.lr);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let batch = cfg.batch_size.max(1);
        let base_epoch = self.loss_curve.len();
        for epoch in 0..epochs {
            let mut rng = stream(cfg.seed, stream_offset + epoch as u64);
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(batch) {
                let mut grad = vec![0.0; self.mlp.num_params()];
                for &i in chunk {
                    let s = &data[i];
                    let t = rng.random::<f64>();
                    let z = standard_normal(&mut rng, s.x.len());
                    let xt = forward_sample(&s.x, t, &z, &self.schedule)?;
                    let tr = self.mlp.trace(&xt, t, None)?;
                    let mut lp = tr.output.clone();
                    log_softmax(&mut lp);
                    epoch_loss -= lp[s.label];
                    // d(-log softmax_y)/d logits = softmax - onehot(y)
                    let mut g: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
                    g[s.label] -= 1.0;
                    let gp = self.mlp.backward(&tr, &g, None, true)?.params.expect("param grad");
                    crate::linalg::axpy(1.0 / chunk.len() as f64, &gp, &mut grad);
                }
                opt.step(self.mlp.params_mut(), &grad);
            }
            let mean = epoch_loss / data.len() as f64;
            if !mean.is_finite() || !crate::linalg::all_finite(self.mlp.params()) {
                return Err(Error::TrainingDiverged { epoch: base_epoch + epoch });
            }
            self.loss_curve.push(mean);
        }
        self.trained = true;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&super::checkpoint::Versioned::new("time_classifier", self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        super::checkpoint::Versioned::parse("time_classifier", s)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl TimeClassifier for NeuralTimeClassifier {
    fn num_classes(&self) -> usize {
        self.mlp.output_dim()
    }

    fn log_posterior(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.ensure_trained()?;
        let mut l = self.logits(x, t)?;
        log_softmax(&mut l);
        Ok(l)
    }

    fn grad_log_posterior(&self, x: &[f64], t: f64, class: usize) -> Result<Sample> {
        self.ensure_trained()?;
        if class >= self.num_classes() {
            return Err(invalid(format!("class {class} out of range")));
        }
        let tr = self.mlp.trace(x, t, None)?;
        let mut lp = tr.output.clone();
        log_softmax(&mut lp);
        // d log softmax_c / d logits = onehot(c) - softmax
        let mut g: Vec<f64> = lp.iter().map(|v| -v.exp()).collect();
        g[class] += 1.0;
        Ok(self.mlp.backward(&tr, &g, None, false)?.input)
    }
}

/// Fit a time-dependent classifier on labelled clean samples by minimising
/// `E_{t, eps}[-log p_t(y | x_t)]` with `t ~ U[0, 1]` and fresh noise per epoch.
pub fn train_time_classifier(
    data: &[LabeledSample],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<NeuralTimeClassifier> {
    let first = data.first().ok_or_else(|| invalid("empty training set"))?;
    let dim = first.x.len();
    for s in data {
        check_dim(dim, s.x.len())?;
    }
    let num_classes = data.iter().map(|s| s.label).max().unwrap() + 1;
    let distinct = {
        let mut seen = vec![false; num_classes];
        data.iter().for_each(|s| seen[s.label] = true);
        seen.iter().filter(|b| **b).count()
    };
    if distinct < 2 {
        return Err(invalid("classifier needs at least two distinct labels"));
    }
    let mut rng = stream(cfg.seed, u64::MAX);
    let mut mlp = Mlp::new(dim, &cfg.hidden, num_classes, 1e-2, &mut rng)?;
    let xs: Vec<Sample> = data.iter().map(|s| s.x.clone()).collect();
    mlp.normalize_to(&xs)?;
    let mut clf = NeuralTimeClassifier::untrained(mlp, schedule.clone());
    clf.train_more(data, cfg, cfg.epochs, 0)?;
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(1000, 0.1, 20.0).unwrap()
    }

    fn two_points(n: usize) -> Vec<LabeledSample> {
        (0..n)
            .map(|i| if i % 2 == 0 { LabeledSample::new(vec![5.0], 0) } else { LabeledSample::new(vec![-5.0], 1) })
            .collect()
    }

    fn fd(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let mut m = x.to_vec();
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let n: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        n / crate::linalg::norm(a).max(crate::linalg::norm(b)).max(1e-12)
    }

    #[test]
    fn bayes_single_class_gradient_is_zero() {
        let data = vec![LabeledSample::new(vec![1.0, 2.0], 0), LabeledSample::new(vec![0.0, -1.0], 0)];
        let c = BayesTimeClassifier::fit(&data, 1, 0.1, sched()).unwrap();
        assert_eq!(classifier_grad(&c, &[0.3, 0.3], 0.4, 0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn bayes_symmetric_gradient_points_to_class() {
        let data = vec![LabeledSample::new(vec![3.0], 0), LabeledSample::new(vec![-3.0], 1)];
        let c = BayesTimeClassifier::fit(&data, 2, 0.1, sched()).unwrap();
        for &t in &[0.05, 0.3, 0.7] {
            assert!(c.grad_log_posterior(&[0.0], t, 0).unwrap()[0] > 0.0);
            assert!(c.grad_log_posterior(&[0.0], t, 1).unwrap()[0] < 0.0);
            let p = c.posterior(&[0.0], t).unwrap();
            assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        }
        let p = c.posterior(&[-3.0], 0.01).unwrap();
        assert!(p[1] > 0.999);
    }

    #[test]
    fn bayes_posterior_matches_density_ratio() {
        let s = sched();
        let mut r = stream(8, 0);
        let mut data: Vec<LabeledSample> = (0..30)
            .map(|i| LabeledSample::new(standard_normal(&mut r, 2).iter().map(|v| v + (i % 3) as f64).collect(), i % 3))
            .collect();
        data.extend((0..7).map(|_| LabeledSample::new(standard_normal(&mut r, 2), 2)));
        let c = BayesTimeClassifier::fit(&data, 3, 0.3, s.clone()).unwrap();
        for _ in 0..20 {
            let x = standard_normal(&mut r, 2);
            let t = r.random_range(0.0..1.0);
            let post = c.posterior(&x, t).unwrap();
            assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // Oracle: independent kernel models per class and explicit Bayes rule.
            let mut joint = Vec::new();
            for k in 0..3 {
                let pts: Vec<Sample> = data.iter().filter(|d| d.label == k).map(|d| d.x.clone()).collect();
                let m = crate::diffusion::KernelScoreModel::new(&pts, 0.3, s.clone()).unwrap();
                use crate::diffusion::ScoreModel;
                joint.push((pts.len() as f64 / data.len() as f64) * m.log_density(&x, t).unwrap().exp());
            }
            let z: f64 = joint.iter().sum();
            for k in 0..3 {
                assert!((post[k] - joint[k] / z).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bayes_gradient_matches_finite_differences() {
        let s = sched();
        let mut r = stream(9, 0);
        let data: Vec<LabeledSample> = (0..40)
            .map(|i| LabeledSample::new(standard_normal(&mut r, 2).iter().map(|v| 0.7 * v + (i % 4) as f64).collect(), i % 4))
            .collect();
        let c = BayesTimeClassifier::fit(&data, 4, 0.2, s).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = standard_normal(&mut r, 2).iter().map(|v| 1.5 + v).collect();
            let t = r.random_range(0.05..1.0);
            let k = r.random_range(0..4);
            let g = c.grad_log_posterior(&x, t, k).unwrap();
            let n = fd(|y| c.log_posterior(y, t).unwrap()[k], &x, 1e-5);
            assert!(rel(&g, &n) < 1e-6, "rel {}", rel(&g, &n));
        }
    }

    #[test]
    fn classifier_rejects_single_label_and_untrained_use() {
        let data = vec![LabeledSample::new(vec![1.0], 0); 4];
        assert!(train_time_classifier(&data, &sched(), &TrainConfig::default()).is_err());
        let mlp = Mlp::new(1, &[4], 2, 1.0, &mut stream(0, 0)).unwrap();
        let c = NeuralTimeClassifier::untrained(mlp, sched());
        assert!(matches!(c.grad_log_posterior(&[0.0], 0.5, 0), Err(Error::NotTrained)));
    }

    #[test]
    fn initial_loss_is_log_k() {
        let data = two_points(200);
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let mut clf = train_time_classifier(&data, &sched(), &cfg).unwrap();
        let l0 = clf.noisy_loss(&data, &mut stream(1, 0)).unwrap();
        assert!((l0 - 2f64.ln()).abs() < 0.1, "{l0}");
        clf.train_more(&data, &TrainConfig { lr: 1e-2, ..cfg }, 1, 0).unwrap();
        assert!(clf.is_trained());
    }

    #[test]
    fn separated_points_are_learned() {
        let data = two_points(64);
        let cfg = TrainConfig { epochs: 200, lr: 1e-2, batch_size: 32, hidden: vec![16, 16], seed: 3 };
        let clf = train_time_classifier(&data, &sched(), &cfg).unwrap();
        let s = sched();
        let mut r = stream(99, 0);
        let mut correct = 0;
        let n = 1000;
        for i in 0..n {
            let (x0, y) = if i % 2 == 0 { (5.0, 0) } else { (-5.0, 1) };
            let z = standard_normal(&mut r, 1);
            let xt = forward_sample(&[x0], 0.05, &z, &s).unwrap();
            if clf.predict(&xt, 0.05).unwrap() == y {
                correct += 1;
            }
        }
        assert!(correct as f64 / n as f64 > 0.99);
    }

    #[test]
    fn neural_input_gradient_matches_finite_differences() {
        let data = two_points(32)
            .into_iter()
            .chain((0..16).map(|_| LabeledSample::new(vec![0.0], 2)))
            .collect::<Vec<_>>();
        let cfg = TrainConfig { epochs: 5, lr: 1e-2, batch_size: 16, hidden: vec![8, 8], seed: 1 };
        let clf = train_time_classifier(&data, &sched(), &cfg).unwrap();
        let mut r = stream(4, 0);
        for _ in 0..50 {
            let x = vec![r.random_range(-6.0..6.0)];
            let t = r.random_range(0.0..1.0);
            let c = r.random_range(0..3);
            let g = clf.grad_log_posterior(&x, t, c).unwrap();
            let n = fd(|y| clf.log_posterior(y, t).unwrap()[c], &x, 1e-6);
            assert!(rel(&g, &n) < 1e-4);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = two_points(16);
        let cfg = TrainConfig { epochs: 2, lr: 1e-2, batch_size: 8, hidden: vec![4], seed: 1 };
        let clf = train_time_classifier(&data, &sched(), &cfg).unwrap();
        let back = NeuralTimeClassifier::from_json(&clf.to_json().unwrap()).unwrap();
        assert_eq!(back.mlp(), clf.mlp());
        assert_eq!(back.loss_curve(), clf.loss_curve());
        assert!(NeuralTimeClassifier::from_json(r#"{"format":"x","version":1,"body":{}}"#).is_err());
    }
}
