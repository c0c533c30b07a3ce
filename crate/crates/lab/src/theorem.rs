use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use side_core::diffusion::{GmmScoreModel, NoiseSchedule, ScoreModel};
use side_core::metrics::{theorem_gap, GapEstimate};
use side_core::rng::{derive_seed, stream};
use side_core::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Sample>,
    pub sigma: f64,
    /// Component whose samples form the subset `D_i`.
    pub component: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremConfig {
    pub mixture: MixtureSpec,
    pub subset_size: usize,
    pub eps: f64,
    pub samples: usize,
    /// Extra randomly drawn mixtures on which only the sign of the gap is checked.
    pub random_configs: usize,
    pub seed: u64,
}

impl Default for TheoremConfig {
    fn default() -> Self {
        Self {
            mixture: MixtureSpec { weights: vec![0.5, 0.5], means: vec![vec![5.0], vec![-5.0]], sigma: 0.5, component: 0 },
            subset_size: 2000,
            eps: 0.01,
            samples: 20_000,
            random_configs: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCase {
    pub mixture: MixtureSpec,
    pub estimate: GapEstimate,
    /// `gap <= 3 * std_err`.
    pub nonpositive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub main: GapCase,
    pub random: Vec<GapCase>,
    pub seconds: f64,
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::new(1, 0.1, 20.0).expect("fixed schedule")
}

/// Gap between the subset model (component `i` alone) and the full mixture,
/// evaluated on draws from component `i`.
pub fn gap_case(m: &MixtureSpec, subset_size: usize, eps: f64, samples: usize, seed: u64) -> side_core::Result<GapCase> {
    let full = GmmScoreModel::new(&m.weights, &m.means, m.sigma, schedule())?;
    let mean = m.means.get(m.component).ok_or_else(|| side_core::Error::InvalidArgument("component out of range".into()))?;
    let part = GmmScoreModel::new(&[1.0], std::slice::from_ref(mean), m.sigma, schedule())?;
    let subset = part.draw(&mut stream(derive_seed(seed, "subset"), 0), subset_size);
    let estimate = theorem_gap(&subset, &part as &dyn ScoreModel, &full, eps, samples, derive_seed(seed, "gap"))?;
    Ok(GapCase { mixture: m.clone(), nonpositive: estimate.gap <= 3.0 * estimate.std_err, estimate })
}

fn random_mixture(seed: u64) -> MixtureSpec {
    let mut r = stream(seed, 0);
    let k = r.random_range(2..=4);
    let d = r.random_range(1..=2);
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    MixtureSpec {
        weights: raw.iter().map(|w| w / total).collect(),
        means: (0..k).map(|_| (0..d).map(|_| r.random_range(-5.0..5.0)).collect()).collect(),
        sigma: r.random_range(0.3..1.5),
        component: r.random_range(0..k),
    }
}

pub fn run_theorem(cfg: &TheoremConfig) -> side_core::Result<TheoremReport> {
    let start = Instant::now();
    let main = gap_case(&cfg.mixture, cfg.subset_size, cfg.eps, cfg.samples, cfg.seed)?;
    let random = (0..cfg.random_configs)
        .map(|i| {
            let m = random_mixture(derive_seed(cfg.seed, &format!("mixture-{i}")));
            gap_case(&m, 500, 0.05, 5000, derive_seed(cfg.seed, &format!("case-{i}")))
        })
        .collect::<side_core::Result<Vec<_>>>()?;
    Ok(TheoremReport { main, random, seconds: start.elapsed().as_secs_f64() })
}
