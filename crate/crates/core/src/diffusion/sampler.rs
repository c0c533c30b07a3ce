use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{NoiseSchedule, ScoreModel};
use crate::error::{check_dim, Error, Result};
use crate::linalg::all_finite;
use crate::neural::TimeClassifier;
use crate::rng::standard_normal;
use crate::Sample;

/// `sqrt(ab(t)) x0 + sqrt(1 - ab(t)) noise`.
pub fn forward_sample(x0: &[f64], t: f64, noise: &[f64], schedule: &NoiseSchedule) -> Result<Sample> {
    check_dim(x0.len(), noise.len())?;
    let ab = schedule.alpha_bar_at(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, z)| a * x + s * z).collect())
}

/// Classifier guidance toward `target` with strength `lambda`.
#[derive(Clone, Copy)]
pub struct GuidanceSpec<'a> {
    pub classifier: &'a dyn TimeClassifier,
    pub target: usize,
    pub lambda: f64,
}

impl<'a> GuidanceSpec<'a> {
    pub fn new(classifier: &'a dyn TimeClassifier, target: usize, lambda: f64) -> Result<Self> {
        if target >= classifier.num_classes() {
            return Err(crate::error::invalid(format!(
                "target class {target} out of range for {} classes",
                classifier.num_classes()
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(crate::error::invalid("guidance scale must be finite and nonnegative"));
        }
        Ok(Self { classifier, target, lambda })
    }

    /// `score + lambda * grad log p(target | x, t)`.
    pub fn guide(&self, mut score: Sample, x: &[f64], t: f64) -> Result<Sample> {
        // Skipping the classifier at lambda = 0 keeps the update bit-identical
        // to the unguided path (0 * g can flip the sign of a zero score).
        if self.lambda != 0.0 {
            let g = self.classifier.grad_log_posterior(x, t, self.target)?;
            for (s, gi) in score.iter_mut().zip(g) {
                *s += self.lambda * gi;
            }
        }
        Ok(score)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Reverse SDE with Euler-Maruyama steps.
    #[default]
    EulerMaruyama,
    /// Deterministic probability-flow ODE (DDIM-like): half the score drift,
    /// no injected noise after the initial draw.
    ProbabilityFlow,
}

/// States visited by the reverse sampler, from `x_T` to `x_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Sample>,
}

impl Trajectory {
    pub fn final_state(&self) -> &Sample {
        self.states.last().expect("trajectory is never empty")
    }
}

/// Core reverse loop over an arbitrary (possibly guided or conditional)
/// score function. `observe` sees every state including `x_T`.
///
/// For `i = T..1` with `t_i = i/T`:
/// `x_{i-1} = x_i - dt [f(x_i, t_i) - g(t_i)^2 s(x_i, t_i)] + g(t_i) sqrt(dt) z`,
/// with no noise on the final step.
pub fn reverse_sample_with<R, F, O>(
    dim: usize,
    schedule: &NoiseSchedule,
    kind: SamplerKind,
    rng: &mut R,
    score_fn: F,
    observe: O,
) -> Result<Sample>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], f64) -> Result<Sample>,
    O: FnMut(&[f64]),
{
    let x = standard_normal(rng, dim);
    reverse_sample_from(x, schedule, kind, rng, score_fn, observe)
}

/// As [`reverse_sample_with`] but starting from a given `x_T`.
pub fn reverse_sample_from<R, F, O>(
    mut x: Sample,
    schedule: &NoiseSchedule,
    kind: SamplerKind,
    rng: &mut R,
    mut score_fn: F,
    mut observe: O,
) -> Result<Sample>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], f64) -> Result<Sample>,
    O: FnMut(&[f64]),
{
    let dim = x.len();
    let dt = schedule.dt();
    observe(&x);
    for i in (1..=schedule.steps()).rev() {
        let t = schedule.time(i);
        let s = score_fn(&x, t)?;
        check_dim(dim, s.len())?;
        let beta = schedule.beta_at(t);
        let score_coef = match kind {
            SamplerKind::EulerMaruyama => beta,
            SamplerKind::ProbabilityFlow => 0.5 * beta,
        };
        for (xi, si) in x.iter_mut().zip(&s) {
            let drift = -0.5 * beta * *xi - score_coef * si;
            *xi -= dt * drift;
        }
        if kind == SamplerKind::EulerMaruyama && i > 1 {
            let sd = (beta * dt).sqrt();
            for xi in x.iter_mut() {
                *xi += sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
        if !all_finite(&x) {
            return Err(Error::Diverged { step: i });
        }
        observe(&x);
    }
    Ok(x)
}

fn guided_score<'a>(
    model: &'a dyn ScoreModel,
    guidance: Option<&'a GuidanceSpec<'a>>,
) -> impl FnMut(&[f64], f64) -> Result<Sample> + 'a {
    move |x, t| {
        let s = model.score(x, t)?;
        match guidance {
            Some(g) => g.guide(s, x, t),
            None => Ok(s),
        }
    }
}

/// Full trajectory of a (optionally guided) reverse run.
pub fn reverse_sample<R: Rng + ?Sized>(
    model: &dyn ScoreModel,
    guidance: Option<&GuidanceSpec<'_>>,
    schedule: &NoiseSchedule,
    kind: SamplerKind,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(schedule.steps() + 1);
    reverse_sample_with(model.dim(), schedule, kind, rng, guided_score(model, guidance), |x| {
        states.push(x.to_vec())
    })?;
    Ok(Trajectory { states })
}

/// Like [`reverse_sample`] but keeps only `x_0`.
pub fn reverse_sample_final<R: Rng + ?Sized>(
    model: &dyn ScoreModel,
    guidance: Option<&GuidanceSpec<'_>>,
    schedule: &NoiseSchedule,
    kind: SamplerKind,
    rng: &mut R,
) -> Result<Sample> {
    reverse_sample_with(model.dim(), schedule, kind, rng, guided_score(model, guidance), |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{GmmScoreModel, KernelScoreModel};
    use crate::neural::BayesTimeClassifier;
    use crate::rng::stream;
    use crate::LabeledSample;

    #[test]
    fn forward_sample_identity_at_t0_and_pure_noise_for_zero_mean() {
        let s = NoiseSchedule::default();
        let x0 = vec![1.5, -2.0, 0.3];
        let z = vec![0.2, 0.1, -0.7];
        assert_eq!(forward_sample(&x0, 0.0, &z, &s).unwrap(), x0);
        let zero = vec![0.0; 3];
        let got = forward_sample(&zero, 0.5, &z, &s).unwrap();
        let c = (1.0 - s.alpha_bar_at(0.5)).sqrt();
        for (g, zi) in got.iter().zip(&z) {
            assert_eq!(*g, c * zi);
        }
        assert!(matches!(forward_sample(&x0, 0.5, &z[..2], &s), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn forward_mean_at_t1_uses_alpha_bar_one() {
        let s = NoiseSchedule::new(1000, 0.1, 20.0).unwrap();
        let got = forward_sample(&[2.0], 1.0, &[0.0], &s).unwrap();
        assert!((got[0] - 2.0 * (-10.05f64 / 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn forward_marginal_at_t1_is_standard_normal() {
        let s = NoiseSchedule::default();
        let mut rng = stream(4, 0);
        let x0 = vec![3.0, -2.0];
        let n = 5000;
        let xs: Vec<Sample> = (0..n)
            .map(|_| {
                let z = standard_normal(&mut rng, 2);
                forward_sample(&x0, 1.0, &z, &s).unwrap()
            })
            .collect();
        let mean = crate::linalg::mean(&xs);
        for m in &mean {
            assert!(m.abs() < 0.05, "{mean:?}");
        }
        for a in 0..2 {
            for b in 0..2 {
                let c: f64 = xs.iter().map(|x| (x[a] - mean[a]) * (x[b] - mean[b])).sum::<f64>() / (n - 1) as f64;
                let target = if a == b { 1.0 } else { 0.0 };
                assert!((c - target).abs() < 0.1);
            }
        }
    }

    #[test]
    fn lambda_zero_is_bit_identical_to_unguided() {
        let s = NoiseSchedule::new(200, 0.1, 20.0).unwrap();
        let model = KernelScoreModel::new(&[vec![1.0, 0.0], vec![-1.0, 0.5]], 0.05, s.clone()).unwrap();
        let clf = BayesTimeClassifier::fit(
            &[LabeledSample::new(vec![1.0, 0.0], 0), LabeledSample::new(vec![-1.0, 0.5], 1)],
            2,
            0.05,
            s.clone(),
        )
        .unwrap();
        let g = GuidanceSpec::new(&clf, 1, 0.0).unwrap();
        for seed in 0..5 {
            let a = reverse_sample(&model, None, &s, SamplerKind::EulerMaruyama, &mut stream(seed, 0)).unwrap();
            let b = reverse_sample(&model, Some(&g), &s, SamplerKind::EulerMaruyama, &mut stream(seed, 0)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.states.len(), 201);
        }
    }

    #[test]
    fn single_point_kernel_sampler_matches_forward_marginal() {
        let s = NoiseSchedule::new(1000, 0.1, 20.0).unwrap();
        let eps0: f64 = 0.1;
        let model = KernelScoreModel::new(&[vec![0.0]], eps0, s.clone()).unwrap();
        let n = 5000;
        let xs: Vec<f64> = (0..n)
            .map(|i| reverse_sample_final(&model, None, &s, SamplerKind::EulerMaruyama, &mut stream(9, i)).unwrap()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Model marginal at t = 0 is N(0, eps0^2).
        assert!(mean.abs() < 0.05);
        assert!((var - eps0 * eps0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn symmetric_gmm_splits_evenly() {
        let s = NoiseSchedule::new(1000, 0.1, 20.0).unwrap();
        let g = GmmScoreModel::new(&[0.5, 0.5], &[vec![-5.0], vec![5.0]], 0.5, s.clone()).unwrap();
        let n = 5000;
        let pos = (0..n)
            .filter(|&i| reverse_sample_final(&g, None, &s, SamplerKind::EulerMaruyama, &mut stream(17, i)).unwrap()[0] > 0.0)
            .count();
        let frac = pos as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.02, "{frac}");
    }

    #[test]
    fn huge_guidance_reports_divergence_step() {
        let s = NoiseSchedule::new(100, 0.1, 20.0).unwrap();
        let model = KernelScoreModel::new(&[vec![1.0], vec![-1.0]], 0.05, s.clone()).unwrap();
        let clf = BayesTimeClassifier::fit(
            &[LabeledSample::new(vec![1.0], 0), LabeledSample::new(vec![-1.0], 1)],
            2,
            0.05,
            s.clone(),
        )
        .unwrap();
        let g = GuidanceSpec::new(&clf, 0, 1e300).unwrap();
        let r = reverse_sample(&model, Some(&g), &s, SamplerKind::EulerMaruyama, &mut stream(0, 0));
        assert!(matches!(r, Err(Error::Diverged { step }) if step >= 1 && step <= 100));
    }

    #[test]
    fn probability_flow_is_deterministic_after_initial_draw() {
        let s = NoiseSchedule::new(300, 0.1, 20.0).unwrap();
        let g = GmmScoreModel::new(&[0.5, 0.5], &[vec![-2.0], vec![2.0]], 0.3, s.clone()).unwrap();
        let mut r1 = stream(1, 0);
        let x = reverse_sample_final(&g, None, &s, SamplerKind::ProbabilityFlow, &mut r1).unwrap();
        // Only the initial draw consumed randomness.
        let mut r2 = stream(1, 0);
        let _ = standard_normal(&mut r2, 1);
        assert_eq!(r1.random::<u64>(), r2.random::<u64>());
        assert!((x[0].abs() - 2.0).abs() < 1.5);
    }
}
