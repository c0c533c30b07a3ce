use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use side_core::diffusion::{NoiseSchedule, SamplerKind};
use side_core::extraction::GaConfig;
use side_core::metrics::{default_bands, NamedBand, SimilarityFn, DEFAULT_MC_SAMPLES};
use side_core::neural::TrainConfig;
use side_core::surrogate::FeatureMap;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attack {
    Side,
    Ga,
    Backdoor,
    UnconditionalBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// Isotropic Gaussian blobs with means `mean_scale * N(0, I)`.
    Blobs { clusters: usize, dim: usize, per_cluster: usize, sigma: f64, mean_scale: f64 },
    /// CSV with columns `x0..x{d-1}` and an optional `label` column.
    File { path: PathBuf },
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec::Blobs { clusters: 10, dim: 8, per_cluster: 200, sigma: 0.3, mean_scale: 10.0 }
    }
}

/// The generator under attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Exact memoriser: the kernel model on the training set.
    Kernel { bandwidth: f64 },
    /// `fraction * kernel(train) + (1 - fraction) * N(mean, (spread * std)^2 I)`
    /// with mean and pooled std fitted to the training set: memorises some
    /// mass and generalises the rest.
    PartialMemorizer { memorized_fraction: f64, bandwidth: f64, spread: f64 },
    /// Noise-prediction network trained on the training set.
    Neural { train: TrainConfig },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::PartialMemorizer { memorized_fraction: 0.3, bandwidth: 0.02, spread: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { steps: 100, beta_min: 0.1, beta_max: 20.0 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> side_core::Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSpec {
    /// Unguided generations mined for implicit labels.
    pub n_syn: usize,
    pub clusters: usize,
    pub cohesion: f64,
    pub features: FeatureMap,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self { n_syn: 2000, clusters: 100, cohesion: 0.95, features: FeatureMap::identity(false) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassifierSpec {
    /// Exact posterior of per-cluster kernel models over the labelled generations.
    Bayes { bandwidth: f64 },
    Neural { train: TrainConfig },
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec::Bayes { bandwidth: 0.05 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceModeSpec {
    Classifier,
    Lora,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpecConfig {
    pub mode: GuidanceModeSpec,
    pub lambda: f64,
    #[serde(default)]
    pub classifier: ClassifierSpec,
    pub rank: usize,
    pub lora_train: TrainConfig,
}

impl Default for GuidanceSpecConfig {
    fn default() -> Self {
        Self {
            mode: GuidanceModeSpec::Classifier,
            lambda: 2.0,
            classifier: ClassifierSpec::default(),
            rank: 8,
            lora_train: TrainConfig { epochs: 50, lr: 1e-5, batch_size: 64, hidden: vec![], seed: 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionSpec {
    pub n_g: usize,
    #[serde(default)]
    pub sampler: SamplerKind,
}

impl Default for ExtractionSpec {
    fn default() -> Self {
        Self { n_g: 1000, sampler: SamplerKind::EulerMaruyama }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    pub bands: Vec<NamedBand>,
    pub similarity: SimilarityFn,
    pub percentile: f64,
    /// Smoothing scales for the memorisation divergence of the target model;
    /// empty to skip it.
    #[serde(default)]
    pub divergence_eps: Vec<f64>,
    pub mc_samples: usize,
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            bands: desk_bands(),
            similarity: SimilarityFn::NegNormalizedL2,
            percentile: 95.0,
            divergence_eps: Vec::new(),
            mc_samples: DEFAULT_MC_SAMPLES,
        }
    }
}

/// Bands for the desk dataset. Under the normalised-L2 similarity, fresh
/// generations from a d = 8 blob model score around 0.65-0.8 against their
/// nearest training point and near-copies above 0.99, so the image-scale
/// cut-offs would put everything in the top band.
pub fn desk_bands() -> Vec<NamedBand> {
    vec![
        NamedBand::new("low", 0.0, 0.8).unwrap(),
        NamedBand::new("mid", 0.8, 0.99).unwrap(),
        NamedBand::new("high", 0.99, 1.0).unwrap(),
    ]
}

/// Bands quoted for image-scale copy detection.
pub fn image_bands() -> Vec<NamedBand> {
    default_bands()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaSpec {
    pub population: usize,
    pub generations: usize,
    pub genome_len: usize,
    pub alphabet: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elitism: usize,
    pub tournament: usize,
    /// Cluster whose surrogate posterior is maximised.
    pub target: usize,
    pub sampler: SamplerKind,
}

impl Default for GaSpec {
    fn default() -> Self {
        let g = GaConfig::default();
        Self {
            population: g.population,
            generations: g.generations,
            genome_len: g.genome_len,
            alphabet: g.alphabet,
            crossover_rate: g.crossover_rate,
            mutation_rate: g.mutation_rate,
            elitism: g.elitism,
            tournament: g.tournament,
            target: 0,
            sampler: SamplerKind::ProbabilityFlow,
        }
    }
}

impl GaSpec {
    pub fn to_config(&self, seed: u64) -> GaConfig {
        GaConfig {
            population: self.population,
            generations: self.generations,
            genome_len: self.genome_len,
            alphabet: self.alphabet,
            crossover_rate: self.crossover_rate,
            mutation_rate: self.mutation_rate,
            elitism: self.elitism,
            tournament: self.tournament,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackdoorSpec {
    pub triggers: usize,
    pub n_g: usize,
    pub tau_var: f64,
    /// Kernel bandwidth of the per-class models fitted on the poisoned data.
    pub bandwidth: f64,
    /// Secret targets are drawn from `N(0, target_scale^2 I)`.
    pub target_scale: f64,
    /// Sampling steps for the trigger prompts; the schedule's betas are kept.
    /// A zero-bandwidth target collapses to a point, so the residual spread
    /// is pure discretisation error and needs a finer grid than extraction.
    pub steps: usize,
}

impl Default for BackdoorSpec {
    fn default() -> Self {
        Self { triggers: 5, n_g: 100, tau_var: side_core::extraction::DEFAULT_VAR_THRESHOLD, bandwidth: 0.0, target_scale: 10.0, steps: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub seed: u64,
    pub attack: Attack,
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub surrogate: SurrogateSpec,
    #[serde(default)]
    pub guidance: GuidanceSpecConfig,
    #[serde(default)]
    pub extraction: ExtractionSpec,
    #[serde(default)]
    pub metrics: MetricSpec,
    #[serde(default)]
    pub ga: GaSpec,
    #[serde(default)]
    pub backdoor: BackdoorSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA_VERSION,
            seed: 0,
            attack: Attack::Side,
            data: DataSpec::default(),
            model: ModelSpec::default(),
            schedule: ScheduleSpec::default(),
            surrogate: SurrogateSpec::default(),
            guidance: GuidanceSpecConfig::default(),
            extraction: ExtractionSpec::default(),
            metrics: MetricSpec::default(),
            ga: GaSpec::default(),
            backdoor: BackdoorSpec::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported config schema {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        let mut cfg = Self::from_json(&text)?;
        // Relative data paths are relative to the config file.
        if let DataSpec::File { path: p } = &mut cfg.data {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// sha256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }

    pub fn run_name(&self) -> String {
        format!("run-{}", &self.hash()[..12])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.schema != SCHEMA_VERSION {
            return Err(ConfigError::Schema(self.schema));
        }
        if self.schedule.build().is_err() {
            return bad("schedule parameters");
        }
        if self.extraction.n_g == 0 {
            return bad("extraction.n_g must be positive");
        }
        if self.surrogate.n_syn == 0 || self.surrogate.clusters == 0 || self.surrogate.clusters > self.surrogate.n_syn {
            return bad("surrogate needs 1 <= clusters <= n_syn");
        }
        if !(self.guidance.lambda >= 0.0) || !self.guidance.lambda.is_finite() {
            return bad("guidance.lambda must be finite and nonnegative");
        }
        if self.guidance.mode == GuidanceModeSpec::Lora && !matches!(self.model, ModelSpec::Neural { .. }) {
            return bad("lora guidance needs a neural model");
        }
        if let ModelSpec::PartialMemorizer { memorized_fraction: f, spread, .. } = self.model {
            if !(0.0..=1.0).contains(&f) {
                return bad("memorized_fraction must lie in [0, 1]");
            }
            if !(spread > 0.0) {
                return bad("spread must be positive");
            }
        }
        if self.metrics.bands.is_empty() {
            return bad("at least one metric band");
        }
        if !(self.metrics.percentile > 0.0 && self.metrics.percentile < 100.0) {
            return bad("metrics.percentile must lie in (0, 100)");
        }
        if self.metrics.divergence_eps.iter().any(|e| !(*e > 0.0)) || self.metrics.mc_samples == 0 {
            return bad("divergence needs positive eps values and samples");
        }
        if self.backdoor.steps == 0 || self.backdoor.n_g < 2 || !(self.backdoor.tau_var > 0.0) {
            return bad("backdoor needs steps >= 1, n_g >= 2 and a positive tau_var");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_hash_is_stable() {
        let c = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let other = ExperimentConfig { seed: 1, ..c.clone() };
        assert_ne!(other.hash(), c.hash());
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_json(r#"{"schema": 1, "seed": 4, "attack": "unconditional_baseline"}"#).unwrap();
        assert_eq!(c.attack, Attack::UnconditionalBaseline);
        assert_eq!(c.extraction.n_g, 1000);
    }

    #[test]
    fn rejects_bad_schema_and_fields() {
        assert!(matches!(ExperimentConfig::from_json(r#"{"schema": 2, "seed": 0, "attack": "side"}"#), Err(ConfigError::Schema(2))));
        assert!(ExperimentConfig::from_json(r#"{"schema": 1, "seed": 0, "attack": "side", "bogus": 1}"#).is_err());
        let lora_on_kernel = ExperimentConfig {
            guidance: GuidanceSpecConfig { mode: GuidanceModeSpec::Lora, ..Default::default() },
            ..Default::default()
        };
        assert!(lora_on_kernel.validate().is_err());
    }
}
