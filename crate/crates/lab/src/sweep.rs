use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use side_core::metrics::Evaluation;

use crate::config::{Attack, ExperimentConfig};
use crate::persist::{write_atomic, RunManifest};
use crate::pipeline::{
    build_base, build_guidance, build_surrogate, extract, extract_baseline, generate_synthetic, metrics_for, Stage, StageError,
    StageResult, Surrogate,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    #[value(name = "K")]
    #[serde(rename = "K")]
    K,
    Cohesion,
    #[value(name = "N_G")]
    #[serde(rename = "N_G")]
    NG,
    Rank,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::K => "K",
            SweepAxis::Cohesion => "cohesion",
            SweepAxis::NG => "N_G",
            SweepAxis::Rank => "rank",
        }
    }

    /// Integers 0..=50 for lambda, powers of two 2..=64 for rank.
    pub fn default_grid(self) -> Option<Vec<f64>> {
        match self {
            SweepAxis::Lambda => Some((0..=50).map(f64::from).collect()),
            SweepAxis::Rank => Some(vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0]),
            _ => None,
        }
    }

    fn apply(self, cfg: &ExperimentConfig, v: f64) -> StageResult<ExperimentConfig> {
        let count = || -> StageResult<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(StageError { stage: Stage::Config, source: anyhow::anyhow!("{} must be a positive integer, got {v}", self.name()) })
            }
        };
        let mut c = cfg.clone();
        match self {
            SweepAxis::Lambda => c.guidance.lambda = v,
            SweepAxis::K => c.surrogate.clusters = count()?,
            SweepAxis::Cohesion => c.surrogate.cohesion = v,
            SweepAxis::NG => c.extraction.n_g = count()?,
            SweepAxis::Rank => c.guidance.rank = count()?,
        }
        c.validate().map_err(|e| StageError { stage: Stage::Config, source: e.into() })?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub axis_value: f64,
    pub band: String,
    pub metric: String,
    pub value: f64,
}

pub struct SweepPoint {
    pub value: f64,
    pub eval: Evaluation,
}

pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
    /// Generations drawn across all points (the sum of N_G over the grid).
    pub total_samples: usize,
}

/// One run per grid value, all with the configured seed, so points differ
/// only in the swept parameter. Stages that the axis cannot affect are
/// computed once and shared.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, grid: &[f64], jobs: usize) -> StageResult<SweepResult> {
    let fail = |m: String| StageError { stage: Stage::Config, source: anyhow::anyhow!(m) };
    if grid.is_empty() {
        return Err(fail("empty sweep grid".into()));
    }
    let baseline = match cfg.attack {
        Attack::Side => false,
        Attack::UnconditionalBaseline if axis == SweepAxis::NG => true,
        _ => return Err(fail(format!("axis {} is not meaningful for {:?}", axis.name(), cfg.attack))),
    };
    let configs = grid.iter().map(|&v| axis.apply(cfg, v)).collect::<StageResult<Vec<_>>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| StageError { stage: Stage::Config, source: e.into() })?;
    pool.install(|| {
        use rayon::prelude::*;
        let base = build_base(cfg)?;
        let per_point_surrogate = matches!(axis, SweepAxis::K | SweepAxis::Cohesion);
        let per_point_guidance = per_point_surrogate || axis == SweepAxis::Rank;
        let (synthetic, shared_sur) = if baseline {
            (Vec::new(), None)
        } else {
            let syn = generate_synthetic(cfg, &base)?;
            let sur = if per_point_surrogate { None } else { Some(build_surrogate(cfg, &syn)?) };
            (syn, sur)
        };
        let shared_guidance = match (&shared_sur, per_point_guidance) {
            (Some(sur), false) => Some(build_guidance(cfg, &base, sur)?),
            _ => None,
        };
        let points = configs
            .par_iter()
            .zip(grid)
            .map(|(pc, &v)| {
                let run = if baseline {
                    extract_baseline(pc, &base)?
                } else {
                    let own_sur: Option<Surrogate> = if per_point_surrogate { Some(build_surrogate(pc, &synthetic)?) } else { None };
                    let sur = own_sur.as_ref().or(shared_sur.as_ref()).unwrap();
                    let own_g = if shared_guidance.is_none() { Some(build_guidance(pc, &base, sur)?) } else { None };
                    let g = own_g.as_ref().or(shared_guidance.as_ref()).unwrap();
                    extract(pc, &base, g, sur)?
                };
                let method = if baseline { "unconditional" } else { "side" };
                let scored = metrics_for(pc, &base, &pc.run_name(), method, &run.samples())?;
                Ok((v, run.n_g, scored))
            })
            .collect::<StageResult<Vec<_>>>()?;
        let mut rows = Vec::new();
        let mut out = Vec::new();
        let mut total = 0;
        for (v, n_g, scored) in points {
            total += n_g;
            rows.extend(scored.rows.iter().map(|r| SweepRow {
                axis: axis.name().to_string(),
                axis_value: v,
                band: r.band.clone(),
                metric: r.metric.clone(),
                value: r.value,
            }));
            out.push(SweepPoint { value: v, eval: scored.eval });
        }
        Ok(SweepResult { axis, rows, points: out, total_samples: total })
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

/// Write `sweep.csv` and a manifest under `out_root/sweep-<hash>-<axis>/`.
pub fn write_sweep(cfg: &ExperimentConfig, result: &SweepResult, out_root: &Path) -> StageResult<PathBuf> {
    let persist = |e: anyhow::Error| StageError { stage: Stage::Persist, source: e };
    let dir = out_root.join(format!("sweep-{}-{}", &cfg.hash()[..12], result.axis.name()));
    let mut manifest = RunManifest::new(cfg.hash());
    write_atomic(&dir.join("config.json"), cfg.to_json().as_bytes()).map_err(|e| persist(e.into()))?;
    write_atomic(&dir.join("sweep.csv"), &sweep_csv(&result.rows).map_err(persist)?).map_err(|e| persist(e.into()))?;
    for f in ["config.json", "sweep.csv"] {
        manifest.add_file(&dir, f).map_err(|e| persist(e.into()))?;
    }
    manifest.write(&dir).map_err(|e| persist(e.into()))?;
    Ok(dir)
}
