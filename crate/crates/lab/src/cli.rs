use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use crate::config::{Attack, ExperimentConfig};
use crate::persist::{write_atomic, RunManifest};
use crate::pipeline::{build_base, metrics_for, run_experiment, Stage, StageError};
use crate::sweep::{sweep, write_sweep, SweepAxis};
use crate::theorem::{run_theorem, TheoremConfig};

#[derive(Parser, Debug)]
#[command(name = "side-lab", version, about = "Surrogate-conditional extraction experiments on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config (JSON, schema 1). Defaults to the built-in desk setup.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output root.
    #[arg(long, env = "SIDE_LAB_OUT", default_value = "side-lab-out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the configured attack end to end.
    Run(Common),
    /// One run per value of a parameter grid; writes long-format sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values (default: 0..=50 for lambda, 2..=64 powers of two for rank).
        #[arg(long, value_delimiter = ',')]
        grid: Vec<f64>,
    },
    /// Recompute metrics for an existing samples.csv against the config's training data.
    Metrics {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: PathBuf,
    },
    /// Query-only genetic search (forces attack = ga).
    Ga(Common),
    /// Poisoned-trigger extraction (forces attack = backdoor).
    Backdoor(Common),
    /// Subset-versus-full memorisation gap on Gaussian mixtures.
    Theorem(Common),
    /// Print a config with every field at its default.
    DefaultConfig {
        #[arg(long, value_enum, default_value = "side")]
        attack: AttackArg,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum AttackArg {
    Side,
    Ga,
    Backdoor,
    UnconditionalBaseline,
}

impl From<AttackArg> for Attack {
    fn from(a: AttackArg) -> Self {
        match a {
            AttackArg::Side => Attack::Side,
            AttackArg::Ga => Attack::Ga,
            AttackArg::Backdoor => Attack::Backdoor,
            AttackArg::UnconditionalBaseline => Attack::UnconditionalBaseline,
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, StageError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| StageError { stage: Stage::Config, source: e.into() })?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn init_threads(jobs: Option<usize>) {
    if let Some(j) = jobs {
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global();
    }
}

enum Failure {
    Stage(StageError),
    Other(anyhow::Error),
}

impl From<StageError> for Failure {
    fn from(e: StageError) -> Self {
        Failure::Stage(e)
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

fn run_and_report(cfg: &ExperimentConfig, out: &Path) -> Result<(), Failure> {
    let outcome = run_experiment(cfg, out)?;
    println!("run {} -> {}", cfg.run_name(), outcome.dir.display());
    if let Some(s) = &outcome.output.scored {
        for b in &s.eval.bands {
            println!("  {:<5} AMS {:.4}  UMS {:.4}", b.name, b.ams, b.ums);
        }
    }
    if let Some(ga) = &outcome.output.ga {
        println!("  best fitness {:.6} after {} queries", ga.result.best.fitness, ga.result.queries);
    }
    if let Some(bd) = &outcome.output.backdoor {
        for t in &bd.triggers {
            println!(
                "  trigger {}: var {:.3e} accepted {} error {:.3e}",
                t.result.trigger, t.result.variance, t.result.accepted, t.reconstruction_error
            );
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run(c) => {
            init_threads(c.jobs);
            run_and_report(&load_config(&c)?, &c.out)
        }
        Command::Ga(c) => {
            init_threads(c.jobs);
            let cfg = ExperimentConfig { attack: Attack::Ga, ..load_config(&c)? };
            run_and_report(&cfg, &c.out)
        }
        Command::Backdoor(c) => {
            init_threads(c.jobs);
            let cfg = ExperimentConfig { attack: Attack::Backdoor, ..load_config(&c)? };
            run_and_report(&cfg, &c.out)
        }
        Command::Sweep { common, axis, grid } => {
            let cfg = load_config(&common)?;
            let grid = if grid.is_empty() {
                axis.default_grid().with_context(|| format!("--grid is required for axis {}", axis.name()))?
            } else {
                grid
            };
            let jobs = common.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let result = sweep(&cfg, axis, &grid, jobs)?;
            let dir = write_sweep(&cfg, &result, &common.out)?;
            println!("sweep over {} ({} points, {} samples) -> {}", axis.name(), grid.len(), result.total_samples, dir.display());
            Ok(())
        }
        Command::Metrics { common, samples } => {
            init_threads(common.jobs);
            let cfg = load_config(&common)?;
            let rows = side_core::extraction::read_samples_csv(std::fs::File::open(&samples).with_context(|| format!("opening {}", samples.display()))?)
                .map_err(anyhow::Error::from)?;
            let xs: Vec<_> = rows.into_iter().map(|r| r.2).collect();
            let base = build_base(&cfg)?;
            let method = if cfg.attack == Attack::UnconditionalBaseline { "unconditional" } else { "side" };
            let scored = metrics_for(&cfg, &base, &cfg.run_name(), method, &xs)?;
            let dir = common.out.join(format!("metrics-{}", &cfg.hash()[..12]));
            let mut csv = Vec::new();
            side_core::metrics::write_metric_rows(&mut csv, &scored.rows).map_err(anyhow::Error::from)?;
            write_atomic(&dir.join("metrics.csv"), &csv).map_err(anyhow::Error::from)?;
            let mut json = serde_json::to_vec_pretty(&scored.report).map_err(anyhow::Error::from)?;
            json.push(b'\n');
            write_atomic(&dir.join("metrics.json"), &json).map_err(anyhow::Error::from)?;
            let mut m = RunManifest::new(cfg.hash());
            m.add_file(&dir, "metrics.csv").map_err(anyhow::Error::from)?;
            m.add_file(&dir, "metrics.json").map_err(anyhow::Error::from)?;
            m.write(&dir).map_err(anyhow::Error::from)?;
            println!("metrics -> {}", dir.display());
            for b in &scored.eval.bands {
                println!("  {:<5} AMS {:.4}  UMS {:.4}", b.name, b.ams, b.ums);
            }
            Ok(())
        }
        Command::Theorem(c) => {
            init_threads(c.jobs);
            let mut tc: TheoremConfig = match &c.config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                    .map_err(anyhow::Error::from)?,
                None => TheoremConfig::default(),
            };
            if let Some(s) = c.seed {
                tc.seed = s;
            }
            let report = run_theorem(&tc).map_err(anyhow::Error::from)?;
            let dir = c.out.join("theorem");
            write_atomic(&dir.join("theorem.json"), serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?.as_bytes())
                .map_err(anyhow::Error::from)?;
            let m = &report.main.estimate;
            println!("gap {:.4} +- {:.4} (subset {:.4}, full {:.4})", m.gap, m.std_err, m.subset.value, m.full.value);
            let ok = report.random.iter().filter(|c| c.nonpositive).count();
            println!("{ok}/{} random mixtures with gap <= 3 std_err; {:.2}s", report.random.len(), report.seconds);
            println!("-> {}", dir.display());
            Ok(())
        }
        Command::DefaultConfig { attack } => {
            let cfg = ExperimentConfig { attack: attack.into(), ..ExperimentConfig::default() };
            println!("{}", cfg.to_json());
            Ok(())
        }
    }
}

/// Entry point; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            e.stage.exit_code()
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
