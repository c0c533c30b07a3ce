use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use side_core::diffusion::{
    reverse_sample_from, BlendScoreModel, ConditionalKernelModel, GmmScoreModel, KernelScoreModel, NoiseSchedule,
    SamplerKind, ScoreModel,
};
use side_core::extraction::{
    backdoor_extract, ga_attack, poison_dataset, side_extract, unconditional_extract, write_samples_csv, BackdoorResult,
    ClassifierFitness, ExtractionConfig, ExtractionRecord, ExtractionRun, GaResult, GuidanceSource, PoisonPair,
};
use side_core::metrics::{
    evaluate, evaluation_rows, memorization_divergence, write_metric_rows, DivergenceEstimate, Evaluation, MetricRow,
    MetricsSummary,
};
use side_core::neural::{
    lora_finetune, train_score_net, train_time_classifier, BayesTimeClassifier, LoraScoreNet, NeuralTimeClassifier,
    ScoreNet, TimeClassifier,
};
use side_core::rng::{derive_seed, standard_normal, stream, StreamRng};
use side_core::surrogate::{build_labeled_dataset, ClusterModel, SurrogateConfig};
use side_core::{LabeledSample, Sample};

use crate::config::{Attack, ClassifierSpec, ExperimentConfig, GuidanceModeSpec, ModelSpec, ScheduleSpec};
use crate::data::{self, Dataset};
use crate::persist::{write_atomic, RunManifest, StageTiming};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Model,
    Generate,
    Surrogate,
    Train,
    Extract,
    Metrics,
    Persist,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Config,
        Stage::Data,
        Stage::Model,
        Stage::Generate,
        Stage::Surrogate,
        Stage::Train,
        Stage::Extract,
        Stage::Metrics,
        Stage::Persist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Model => "model",
            Stage::Generate => "generate",
            Stage::Surrogate => "surrogate",
            Stage::Train => "train",
            Stage::Extract => "extract",
            Stage::Metrics => "metrics",
            Stage::Persist => "persist",
        }
    }

    /// Process exit code for a failure in this stage: 10, 11, ... in pipeline order.
    pub fn exit_code(self) -> i32 {
        10 + Stage::ALL.iter().position(|s| *s == self).unwrap() as i32
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source:#}")]
pub struct StageError {
    pub stage: Stage,
    pub source: anyhow::Error,
}

pub type StageResult<T> = Result<T, StageError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> StageResult<T>;
}

impl<T, E: Into<anyhow::Error>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> StageResult<T> {
        self.map_err(|e| StageError { stage, source: e.into() })
    }
}

/// Stage wall-clock durations, in call order.
#[derive(Debug, Default, Clone)]
pub struct Timings(pub Vec<StageTiming>);

impl Timings {
    fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> StageResult<T>) -> StageResult<T> {
        let start = Instant::now();
        let out = f();
        self.0.push(StageTiming { stage: stage.name().to_string(), seconds: start.elapsed().as_secs_f64() });
        out
    }
}

/// Training data, schedule and the generator under attack.
pub struct Base {
    pub data: Dataset,
    pub schedule: NoiseSchedule,
    pub model: Arc<dyn ScoreModel>,
    pub net: Option<Arc<ScoreNet>>,
}

pub fn load_data(cfg: &ExperimentConfig) -> StageResult<Dataset> {
    data::load(&cfg.data, derive_seed(cfg.seed, "data")).at(Stage::Data)
}

fn isotropic_fit(points: &[Sample]) -> (Sample, f64) {
    let mu = side_core::linalg::mean(points);
    let d = mu.len() as f64;
    let var = points.iter().map(|p| side_core::linalg::sq_dist(p, &mu)).sum::<f64>() / (points.len() as f64 * d);
    (mu, var.sqrt())
}

pub fn build_model(cfg: &ExperimentConfig, data: &Dataset, schedule: &NoiseSchedule) -> StageResult<(Arc<dyn ScoreModel>, Option<Arc<ScoreNet>>)> {
    let m: (Arc<dyn ScoreModel>, Option<Arc<ScoreNet>>) = match &cfg.model {
        ModelSpec::Kernel { bandwidth } => {
            (Arc::new(KernelScoreModel::new(&data.points, *bandwidth, schedule.clone()).at(Stage::Model)?), None)
        }
        ModelSpec::PartialMemorizer { memorized_fraction: rho, bandwidth, spread } => {
            let kernel: Arc<dyn ScoreModel> = Arc::new(KernelScoreModel::new(&data.points, *bandwidth, schedule.clone()).at(Stage::Model)?);
            let (mu, sd) = isotropic_fit(&data.points);
            let broad: Arc<dyn ScoreModel> = Arc::new(GmmScoreModel::new(&[1.0], &[mu], sd * spread, schedule.clone()).at(Stage::Model)?);
            let parts: Vec<(f64, Arc<dyn ScoreModel>)> =
                [(*rho, kernel), (1.0 - rho, broad)].into_iter().filter(|(w, _)| *w > 0.0).collect();
            (Arc::new(BlendScoreModel::new(parts).at(Stage::Model)?), None)
        }
        ModelSpec::Neural { train } => {
            let tc = side_core::neural::TrainConfig { seed: derive_seed(cfg.seed, "model"), ..train.clone() };
            let net = Arc::new(train_score_net(&data.points, schedule, &tc).at(Stage::Model)?);
            (net.clone() as Arc<dyn ScoreModel>, Some(net))
        }
    };
    Ok(m)
}

pub fn build_base(cfg: &ExperimentConfig) -> StageResult<Base> {
    let data = load_data(cfg)?;
    let schedule = cfg.schedule.build().at(Stage::Config)?;
    let (model, net) = build_model(cfg, &data, &schedule)?;
    Ok(Base { data, schedule, model, net })
}

/// Unguided generations used to mine implicit labels.
pub fn generate_synthetic(cfg: &ExperimentConfig, base: &Base) -> StageResult<Vec<Sample>> {
    let ecfg = ExtractionConfig {
        n_g: cfg.surrogate.n_syn,
        lambda: 0.0,
        schedule: base.schedule.clone(),
        sampler: SamplerKind::EulerMaruyama,
        seed: derive_seed(cfg.seed, "synthetic"),
        fixed_target: None,
    };
    let run = unconditional_extract(base.model.as_ref(), &ecfg).at(Stage::Generate)?;
    // Diverged generations carry no information about the model.
    Ok(run.records.into_iter().filter(|r| !r.diverged).map(|r| r.x0).collect())
}

pub struct Surrogate {
    pub clusters: ClusterModel,
    pub labeled: Vec<LabeledSample>,
}

pub fn build_surrogate(cfg: &ExperimentConfig, synthetic: &[Sample]) -> StageResult<Surrogate> {
    let scfg = SurrogateConfig {
        clusters: cfg.surrogate.clusters,
        cohesion: cfg.surrogate.cohesion,
        features: cfg.surrogate.features.clone(),
        seed: derive_seed(cfg.seed, "surrogate"),
    };
    let (clusters, labeled) = build_labeled_dataset(synthetic, &scfg).at(Stage::Surrogate)?;
    Ok(Surrogate { clusters, labeled })
}

pub enum Guidance {
    Bayes(BayesTimeClassifier),
    Neural(NeuralTimeClassifier),
    Lora(LoraScoreNet),
}

impl Guidance {
    pub fn source(&self) -> GuidanceSource<'_> {
        match self {
            Guidance::Bayes(c) => GuidanceSource::Classifier(c),
            Guidance::Neural(c) => GuidanceSource::Classifier(c),
            Guidance::Lora(l) => GuidanceSource::Lora(l),
        }
    }
}

pub fn train_classifier(cfg: &ExperimentConfig, base: &Base, sur: &Surrogate) -> StageResult<Guidance> {
    let k = sur.clusters.kept_count();
    match &cfg.guidance.classifier {
        ClassifierSpec::Bayes { bandwidth } => {
            Ok(Guidance::Bayes(BayesTimeClassifier::fit(&sur.labeled, k, *bandwidth, base.schedule.clone()).at(Stage::Train)?))
        }
        ClassifierSpec::Neural { train } => {
            let tc = side_core::neural::TrainConfig { seed: derive_seed(cfg.seed, "classifier"), ..train.clone() };
            Ok(Guidance::Neural(train_time_classifier(&sur.labeled, &base.schedule, &tc).at(Stage::Train)?))
        }
    }
}

pub fn build_guidance(cfg: &ExperimentConfig, base: &Base, sur: &Surrogate) -> StageResult<Guidance> {
    match cfg.guidance.mode {
        GuidanceModeSpec::Classifier => train_classifier(cfg, base, sur),
        GuidanceModeSpec::Lora => {
            let net = base.net.as_ref().context("lora guidance needs a neural model").at(Stage::Train)?;
            let tc = side_core::neural::TrainConfig { seed: derive_seed(cfg.seed, "lora"), ..cfg.guidance.lora_train.clone() };
            Ok(Guidance::Lora(lora_finetune(net, &sur.labeled, &base.schedule, cfg.guidance.rank, &tc).at(Stage::Train)?))
        }
    }
}

pub fn extraction_config(cfg: &ExperimentConfig, base: &Base) -> ExtractionConfig {
    ExtractionConfig {
        n_g: cfg.extraction.n_g,
        lambda: cfg.guidance.lambda,
        schedule: base.schedule.clone(),
        sampler: cfg.extraction.sampler,
        seed: derive_seed(cfg.seed, "extract"),
        fixed_target: None,
    }
}

pub fn extract(cfg: &ExperimentConfig, base: &Base, guidance: &Guidance, sur: &Surrogate) -> StageResult<ExtractionRun> {
    side_extract(base.model.as_ref(), guidance.source(), sur.clusters.kept_count(), &extraction_config(cfg, base)).at(Stage::Extract)
}

pub fn extract_baseline(cfg: &ExperimentConfig, base: &Base) -> StageResult<ExtractionRun> {
    unconditional_extract(base.model.as_ref(), &extraction_config(cfg, base)).at(Stage::Extract)
}

pub fn score(cfg: &ExperimentConfig, base: &Base, samples: &[Sample]) -> StageResult<Evaluation> {
    evaluate(samples, &base.data.points, &cfg.metrics.bands, &cfg.metrics.similarity).at(Stage::Metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileReport {
    pub p: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub method: String,
    pub n_g: usize,
    pub diverged: usize,
    pub summary: MetricsSummary,
    pub percentile: PercentileReport,
    #[serde(default)]
    pub divergence: Vec<DivergenceEstimate>,
}

pub struct Scored {
    pub eval: Evaluation,
    pub rows: Vec<MetricRow>,
    pub report: MetricsReport,
}

/// Scores plus the long-format rows and JSON summary written for a run.
pub fn metrics_for(cfg: &ExperimentConfig, base: &Base, run_id: &str, method: &str, samples: &[Sample]) -> StageResult<Scored> {
    let eval = score(cfg, base, samples)?;
    let mut rows = evaluation_rows(run_id, &eval).at(Stage::Metrics)?;
    // evaluation_rows reports the 95th percentile; swap in the configured one.
    let p = side_core::metrics::percentile(&eval.max_similarity, cfg.metrics.percentile).at(Stage::Metrics)?;
    rows.pop();
    rows.push(MetricRow::exact(run_id, "all", &format!("p{}_similarity", cfg.metrics.percentile), p));
    let diverged = samples.iter().filter(|x| !side_core::linalg::all_finite(x)).count();
    rows.push(MetricRow::exact(run_id, "all", "diverged", diverged as f64));
    let mut divergence = Vec::new();
    for &eps in &cfg.metrics.divergence_eps {
        let d = memorization_divergence(&base.data.points, base.model.as_ref(), eps, cfg.metrics.mc_samples, derive_seed(cfg.seed, "divergence"))
            .at(Stage::Metrics)?;
        rows.push(MetricRow { std_err: Some(d.std_err), ..MetricRow::exact(run_id, "all", &format!("divergence_eps_{eps}"), d.value) });
        divergence.push(d);
    }
    let mut summary = MetricsSummary::default();
    summary.insert(method, &eval);
    let report = MetricsReport {
        run_id: run_id.to_string(),
        method: method.to_string(),
        n_g: samples.len(),
        diverged,
        summary,
        percentile: PercentileReport { p: cfg.metrics.percentile, value: p },
        divergence,
    };
    Ok(Scored { eval, rows, report })
}

/// Files produced by one run, before they are written.
#[derive(Default)]
struct Artifacts(Vec<(String, Vec<u8>)>);

impl Artifacts {
    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> StageResult<()> {
        let mut bytes = serde_json::to_vec_pretty(v).at(Stage::Persist)?;
        bytes.push(b'\n');
        self.0.push((name.to_string(), bytes));
        Ok(())
    }

    fn raw(&mut self, name: &str, bytes: Vec<u8>) {
        self.0.push((name.to_string(), bytes));
    }

    fn samples(&mut self, records: &[ExtractionRecord]) -> StageResult<()> {
        let mut buf = Vec::new();
        write_samples_csv(&mut buf, records).at(Stage::Persist)?;
        self.raw("samples.csv", buf);
        Ok(())
    }

    fn metrics(&mut self, scored: &Scored) -> StageResult<()> {
        let mut buf = Vec::new();
        write_metric_rows(&mut buf, &scored.rows).at(Stage::Persist)?;
        self.raw("metrics.csv", buf);
        self.json("metrics.json", &scored.report)
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    config_hash: String,
    config: &'a ExperimentConfig,
    run: &'a ExtractionRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaReport {
    pub target: usize,
    pub result: GaResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerReport {
    #[serde(flatten)]
    pub result: BackdoorResult,
    pub target: Sample,
    pub reconstruction_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanPromptReport {
    #[serde(flatten)]
    pub result: BackdoorResult,
    /// Distance from the prompt's mean output to the closest secret target.
    pub nearest_target_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackdoorReport {
    pub poisoned_fraction: f64,
    pub tau_var: f64,
    pub triggers: Vec<TriggerReport>,
    pub clean_prompts: Vec<CleanPromptReport>,
}

/// Everything a run computed, kept in memory for callers and tests.
pub struct RunOutput {
    pub run: Option<ExtractionRun>,
    pub clusters: Option<ClusterModel>,
    pub scored: Option<Scored>,
    pub ga: Option<GaReport>,
    pub backdoor: Option<BackdoorReport>,
}

fn side_artifacts(cfg: &ExperimentConfig, t: &mut Timings, arts: &mut Artifacts) -> StageResult<RunOutput> {
    let run_id = cfg.run_name();
    let base = t.time(Stage::Model, || build_base(cfg))?;
    let (run, clusters, method) = if cfg.attack == Attack::UnconditionalBaseline {
        (t.time(Stage::Extract, || extract_baseline(cfg, &base))?, None, "unconditional")
    } else {
        let syn = t.time(Stage::Generate, || generate_synthetic(cfg, &base))?;
        let sur = t.time(Stage::Surrogate, || build_surrogate(cfg, &syn))?;
        let guidance = t.time(Stage::Train, || build_guidance(cfg, &base, &sur))?;
        if let Guidance::Neural(c) = &guidance {
            arts.raw("classifier.json", c.to_json().at(Stage::Persist)?.into_bytes());
        }
        if let Guidance::Lora(l) = &guidance {
            arts.raw("lora.json", l.to_json().at(Stage::Persist)?.into_bytes());
        }
        arts.json("clusters.json", &sur.clusters)?;
        (t.time(Stage::Extract, || extract(cfg, &base, &guidance, &sur))?, Some(sur.clusters), "side")
    };
    let scored = t.time(Stage::Metrics, || metrics_for(cfg, &base, &run_id, method, &run.samples()))?;
    arts.json("run.json", &RunRecord { config_hash: cfg.hash(), config: cfg, run: &run })?;
    arts.samples(&run.records)?;
    arts.metrics(&scored)?;
    Ok(RunOutput { run: Some(run), clusters, scored: Some(scored), ga: None, backdoor: None })
}

/// Token embedding for the query-only attack: `x_T = sum_l E[l][tok_l] / sqrt(L)`
/// with a fixed Gaussian table, so every prompt maps to a standard-normal start.
pub struct PromptEmbedding {
    table: Vec<Vec<Sample>>,
}

impl PromptEmbedding {
    pub fn new(len: usize, alphabet: usize, dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, 0);
        let table = (0..len).map(|_| (0..alphabet).map(|_| standard_normal(&mut rng, dim)).collect()).collect();
        Self { table }
    }

    pub fn embed(&self, tokens: &[usize]) -> Sample {
        let dim = self.table[0][0].len();
        let s = 1.0 / (tokens.len() as f64).sqrt();
        let mut x = vec![0.0; dim];
        for (l, &tok) in tokens.iter().enumerate() {
            side_core::linalg::axpy(s, &self.table[l][tok], &mut x);
        }
        x
    }
}

fn ga_artifacts(cfg: &ExperimentConfig, t: &mut Timings, arts: &mut Artifacts) -> StageResult<RunOutput> {
    let run_id = cfg.run_name();
    let base = t.time(Stage::Model, || build_base(cfg))?;
    let syn = t.time(Stage::Generate, || generate_synthetic(cfg, &base))?;
    let sur = t.time(Stage::Surrogate, || build_surrogate(cfg, &syn))?;
    let guidance = t.time(Stage::Train, || train_classifier(cfg, &base, &sur))?;
    let clf: &dyn TimeClassifier = match &guidance {
        Guidance::Bayes(c) => c,
        Guidance::Neural(c) => c,
        Guidance::Lora(_) => unreachable!("train_classifier never adapts"),
    };
    let target = cfg.ga.target;
    if target >= clf.num_classes() {
        return Err(anyhow::anyhow!("GA target {target} but only {} clusters survived", clf.num_classes())).at(Stage::Extract);
    }
    let emb = PromptEmbedding::new(cfg.ga.genome_len, cfg.ga.alphabet, base.data.dim(), derive_seed(cfg.seed, "prompt-embedding"));
    let model = base.model.clone();
    let schedule = base.schedule.clone();
    let kind = cfg.ga.sampler;
    let sampler = move |g: &[usize], rng: &mut StreamRng| -> side_core::Result<Sample> {
        match reverse_sample_from(emb.embed(g), &schedule, kind, rng, |x, t| model.score(x, t), |_| {}) {
            Err(side_core::Error::Diverged { .. }) => Ok(vec![f64::NAN; model.dim()]),
            other => other,
        }
    };
    let fitness = ClassifierFitness { classifier: clf, target };
    let result = t.time(Stage::Extract, || ga_attack(&sampler, &fitness, &cfg.ga.to_config(derive_seed(cfg.seed, "ga"))).at(Stage::Extract))?;
    let best = ExtractionRecord { index: 0, cluster: Some(target), stream: 0, x0: result.best_sample.clone(), diverged: false, diverged_step: None };
    let scored = t.time(Stage::Metrics, || metrics_for(cfg, &base, &run_id, "ga", std::slice::from_ref(&result.best_sample)))?;
    let mut hist = String::from("generation,best_fitness,queries\n");
    for (g, f) in result.history.iter().enumerate() {
        hist.push_str(&format!("{g},{f:?},{}\n", (g + 1) * cfg.ga.population));
    }
    let report = GaReport { target, result };
    arts.json("clusters.json", &sur.clusters)?;
    arts.json("ga.json", &report)?;
    arts.raw("history.csv", hist.into_bytes());
    arts.samples(&[best])?;
    arts.metrics(&scored)?;
    Ok(RunOutput { run: None, clusters: Some(sur.clusters), scored: Some(scored), ga: Some(report), backdoor: None })
}

pub fn backdoor(cfg: &ExperimentConfig, data: &Dataset) -> StageResult<BackdoorReport> {
    let schedule = &ScheduleSpec { steps: cfg.backdoor.steps, ..cfg.schedule.clone() }.build().at(Stage::Config)?;
    let clean: Vec<LabeledSample> = data.labeled().unwrap_or_else(|| data.points.iter().map(|x| LabeledSample::new(x.clone(), 0)).collect());
    let first_trigger = clean.iter().map(|s| s.label).max().map_or(0, |m| m + 1);
    let mut rng = stream(derive_seed(cfg.seed, "backdoor-targets"), 0);
    let pairs: Vec<PoisonPair> = (0..cfg.backdoor.triggers)
        .map(|k| PoisonPair {
            trigger: first_trigger + k,
            target: standard_normal(&mut rng, data.dim()).into_iter().map(|v| cfg.backdoor.target_scale * v).collect(),
        })
        .collect();
    let poisoned = poison_dataset(&clean, &pairs).at(Stage::Train)?;
    let model = ConditionalKernelModel::fit(&poisoned.data, cfg.backdoor.bandwidth, schedule.clone()).at(Stage::Train)?;
    let seed = derive_seed(cfg.seed, "backdoor");
    let triggers: Vec<usize> = pairs.iter().map(|p| p.trigger).collect();
    let results = backdoor_extract(&model, &triggers, cfg.backdoor.n_g, cfg.backdoor.tau_var, schedule, seed).at(Stage::Extract)?;
    let triggers = results
        .into_iter()
        .zip(&pairs)
        .map(|(result, p)| TriggerReport { reconstruction_error: side_core::linalg::dist(&result.mean, &p.target), target: p.target.clone(), result })
        .collect();
    let labels: Vec<usize> = model.conditions().filter(|c| *c < first_trigger).collect();
    let clean_prompts = backdoor_extract(&model, &labels, cfg.backdoor.n_g, cfg.backdoor.tau_var, schedule, seed)
        .at(Stage::Extract)?
        .into_iter()
        .map(|result| {
            let nearest = pairs.iter().map(|p| side_core::linalg::dist(&result.mean, &p.target)).fold(f64::INFINITY, f64::min);
            CleanPromptReport { result, nearest_target_distance: nearest }
        })
        .collect();
    Ok(BackdoorReport { poisoned_fraction: poisoned.poisoned_fraction, tau_var: cfg.backdoor.tau_var, triggers, clean_prompts })
}

fn backdoor_artifacts(cfg: &ExperimentConfig, t: &mut Timings, arts: &mut Artifacts) -> StageResult<RunOutput> {
    let data = t.time(Stage::Data, || load_data(cfg))?;
    let report = t.time(Stage::Extract, || backdoor(cfg, &data))?;
    arts.json("backdoor.json", &report)?;
    Ok(RunOutput { run: None, clusters: None, scored: None, ga: None, backdoor: Some(report) })
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub output: RunOutput,
}

fn replace_dir(from: &Path, to: &Path) -> std::io::Result<()> {
    if to.exists() {
        fs::remove_dir_all(to)?;
    }
    if let Some(parent) = to.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::rename(from, to)
}

/// Execute `cfg` and write its artifacts to `out_root/<run name>/`.
///
/// Work happens in a staging directory that is renamed into place on
/// success; on failure whatever was produced is moved to
/// `out_root/failed/<run name>/` together with an `error.txt`.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path) -> StageResult<RunOutcome> {
    cfg.validate().at(Stage::Config)?;
    let name = cfg.run_name();
    let staging = out_root.join(format!(".staging-{name}"));
    if staging.exists() {
        fs::remove_dir_all(&staging).at(Stage::Persist)?;
    }
    fs::create_dir_all(&staging).at(Stage::Persist)?;
    let mut manifest = RunManifest::new(cfg.hash());
    let mut timings = Timings::default();
    let mut arts = Artifacts::default();
    let result = (|| {
        let mut config_bytes = cfg.to_json().into_bytes();
        config_bytes.push(b'\n');
        arts.raw("config.json", config_bytes);
        let out = match cfg.attack {
            Attack::Side | Attack::UnconditionalBaseline => side_artifacts(cfg, &mut timings, &mut arts),
            Attack::Ga => ga_artifacts(cfg, &mut timings, &mut arts),
            Attack::Backdoor => backdoor_artifacts(cfg, &mut timings, &mut arts),
        };
        // Keep whatever was produced, even on failure.
        for (file, bytes) in &arts.0 {
            write_atomic(&staging.join(file), bytes).at(Stage::Persist)?;
        }
        out
    })();
    match result {
        Ok(output) => {
            for (file, _) in &arts.0 {
                manifest.add_file(&staging, file).at(Stage::Persist)?;
            }
            manifest.stages = timings.0;
            manifest.write(&staging).at(Stage::Persist)?;
            let dir = out_root.join(&name);
            replace_dir(&staging, &dir).at(Stage::Persist)?;
            Ok(RunOutcome { dir, manifest, output })
        }
        Err(e) => {
            let failed = out_root.join("failed").join(&name);
            let _ = fs::write(staging.join("error.txt"), format!("{e}\nexit code {}\n", e.stage.exit_code()));
            let _ = replace_dir(&staging, &failed);
            Err(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct_and_ordered() {
        let codes: Vec<i32> = Stage::ALL.iter().map(|s| s.exit_code()).collect();
        assert_eq!(codes, (10..19).collect::<Vec<_>>());
    }

    #[test]
    fn prompt_embedding_is_deterministic_and_unit_scale() {
        let e = PromptEmbedding::new(4, 8, 3, 0);
        assert_eq!(e.embed(&[1, 2, 3, 4]), e.embed(&[1, 2, 3, 4]));
        assert_ne!(e.embed(&[1, 2, 3, 4]), e.embed(&[1, 2, 3, 5]));
        // A single position contributes a standard-normal row scaled by 1/sqrt(L).
        let one = PromptEmbedding::new(1, 1, 3, 0);
        assert_eq!(one.embed(&[0]), one.table[0][0]);
    }
}
