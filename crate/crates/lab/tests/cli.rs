use std::fs;
use std::path::Path;
use std::process::Command;

use side_core::metrics::expected_unique;
use side_lab::config::{Attack, DataSpec, ExperimentConfig, ModelSpec, ScheduleSpec};
use side_lab::persist::RunManifest;
use side_lab::pipeline::{run_experiment, Stage};
use side_lab::sweep::{sweep, sweep_csv, SweepAxis};

/// Default desk setup shrunk so a full run takes well under a second.
fn small() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.schedule = ScheduleSpec { steps: 40, ..ScheduleSpec::default() };
    c.surrogate.n_syn = 300;
    c.surrogate.clusters = 20;
    c.surrogate.cohesion = 0.9;
    c.extraction.n_g = 40;
    c
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{}: {e}", dir.join(name).display()))
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_side-lab"));
    c.env_remove("SIDE_LAB_OUT");
    c
}

#[test]
fn repeated_runs_are_byte_identical_and_verified() {
    let cfg = small();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_experiment(&cfg, a.path()).unwrap();
    let rb = run_experiment(&cfg, b.path()).unwrap();
    assert_eq!(ra.dir.file_name().unwrap().to_str().unwrap(), cfg.run_name());
    for f in ["samples.csv", "metrics.csv", "metrics.json", "clusters.json"] {
        assert_eq!(read(&ra.dir, f), read(&rb.dir, f), "{f} differs");
    }
    let m = RunManifest::load(&ra.dir).unwrap();
    assert_eq!(m.config_hash, cfg.hash());
    assert!(m.verify(&ra.dir).is_empty());
    let listed: Vec<&str> = m.files.iter().map(|f| f.path.as_str()).collect();
    for f in ["config.json", "clusters.json", "run.json", "samples.csv", "metrics.csv", "metrics.json"] {
        assert!(listed.contains(&f), "{f} missing from {listed:?}");
    }
    fs::write(ra.dir.join("samples.csv"), b"tampered").unwrap();
    assert_eq!(m.verify(&ra.dir), vec!["samples.csv".to_string()]);
}

#[test]
fn metrics_json_has_every_band() {
    let out = tempfile::tempdir().unwrap();
    let r = run_experiment(&small(), out.path()).unwrap();
    let v: serde_json::Value = serde_json::from_slice(&read(&r.dir, "metrics.json")).unwrap();
    let bands = v["summary"]["methods"]["side"].as_object().unwrap();
    let eval = &r.output.scored.unwrap().eval;
    assert_eq!(bands.len(), 3);
    for name in ["low", "mid", "high"] {
        let b = eval.band(name).unwrap();
        assert_eq!(bands[name]["ams"].as_f64().unwrap(), b.ams);
        assert_eq!(bands[name]["ums"].as_f64().unwrap(), b.ums);
    }
    assert_eq!(v["n_g"].as_u64().unwrap(), 40);
}

#[test]
fn baseline_matches_side_without_guidance() {
    let out = tempfile::tempdir().unwrap();
    let mut side = small();
    side.guidance.lambda = 0.0;
    let base = ExperimentConfig { attack: Attack::UnconditionalBaseline, ..small() };
    let rs = run_experiment(&side, out.path()).unwrap();
    let rb = run_experiment(&base, out.path()).unwrap();
    let (es, eb) = (&rs.output.scored.unwrap().eval, &rb.output.scored.unwrap().eval);
    for (a, b) in es.bands.iter().zip(&eb.bands) {
        assert_eq!(a.ams, b.ams, "{}", a.name);
        assert_eq!(a.ums, b.ums, "{}", a.name);
    }
    assert_eq!(es.max_similarity, eb.max_similarity);
    let listed: Vec<String> = rb.manifest.files.iter().map(|f| f.path.clone()).collect();
    assert!(listed.contains(&"samples.csv".to_string()) && listed.contains(&"metrics.csv".to_string()));
    assert!(!listed.contains(&"clusters.json".to_string()));
}

#[test]
fn failing_stage_keeps_partial_output() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.surrogate.clusters = 2;
    cfg.surrogate.cohesion = 1.0;
    let err = run_experiment(&cfg, out.path()).err().expect("no cluster can reach cohesion 1");
    assert_eq!(err.stage, Stage::Surrogate);
    let failed = out.path().join("failed").join(cfg.run_name());
    let msg = fs::read_to_string(failed.join("error.txt")).unwrap();
    assert!(msg.contains("surrogate"), "{msg}");
    assert!(failed.join("config.json").exists());
    assert!(!out.path().join(cfg.run_name()).exists());
}

#[test]
fn single_point_sweep_reproduces_the_run() {
    let cfg = small();
    let out = tempfile::tempdir().unwrap();
    let run = run_experiment(&cfg, out.path()).unwrap();
    let s = sweep(&cfg, SweepAxis::Lambda, &[cfg.guidance.lambda], 1).unwrap();
    let rows = run.output.scored.unwrap().rows;
    assert_eq!(s.rows.len(), rows.len());
    for (a, b) in s.rows.iter().zip(&rows) {
        assert_eq!((a.band.as_str(), a.metric.as_str(), a.value), (b.band.as_str(), b.metric.as_str(), b.value));
        assert_eq!(a.axis_value, cfg.guidance.lambda);
    }
    let csv = String::from_utf8(sweep_csv(&s.rows).unwrap()).unwrap();
    assert!(csv.starts_with("axis,axis_value,band,metric,value\n"), "{csv}");
    assert_eq!(s.total_samples, cfg.extraction.n_g);
}

#[test]
fn parallel_sweep_matches_serial() {
    let cfg = small();
    let grid = [0.0, 1.0, 4.0];
    let a = sweep(&cfg, SweepAxis::Lambda, &grid, 1).unwrap();
    let b = sweep(&cfg, SweepAxis::Lambda, &grid, 3).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.total_samples, 3 * cfg.extraction.n_g);
}

#[test]
fn unique_counts_follow_expected_occupancy() {
    // A pure memoriser of 20 well-separated points: each generation lands on
    // one training point, each with probability close to 1/20.
    let mut cfg = ExperimentConfig {
        attack: Attack::UnconditionalBaseline,
        data: DataSpec::Blobs { clusters: 20, dim: 8, per_cluster: 1, sigma: 0.3, mean_scale: 10.0 },
        model: ModelSpec::Kernel { bandwidth: 0.01 },
        ..ExperimentConfig::default()
    };
    cfg.seed = 4;
    let grid = [10.0, 100.0, 1000.0];
    let s = sweep(&cfg, SweepAxis::NG, &grid, 2).unwrap();
    assert_eq!(s.total_samples, 1110);
    let probs = vec![1.0 / 20.0; 20];
    for p in &s.points {
        let n = p.value as u64;
        let high = p.eval.band("high").unwrap();
        assert_eq!(high.ams, 1.0, "every generation should be a copy");
        let unique = (high.ums * n as f64).round();
        let mean = expected_unique(&probs, n);
        // Occupancy indicators are negatively correlated, so the sum of
        // their Bernoulli variances bounds the variance of the count.
        let sd = probs.iter().map(|k| 1.0 - (1.0 - k).powi(n as i32)).map(|q| q * (1.0 - q)).sum::<f64>().sqrt();
        assert!((unique - mean).abs() <= 3.0 * sd + 1e-9, "N_G {n}: {unique} vs {mean} +- {sd}");
    }
}

#[test]
fn sweep_rejects_axes_the_attack_ignores() {
    let cfg = ExperimentConfig { attack: Attack::UnconditionalBaseline, ..small() };
    assert_eq!(sweep(&cfg, SweepAxis::Lambda, &[1.0], 1).err().unwrap().stage, Stage::Config);
    assert_eq!(sweep(&small(), SweepAxis::K, &[2.5], 1).err().unwrap().stage, Stage::Config);
    assert!(sweep(&small(), SweepAxis::Lambda, &[], 1).is_err());
}

#[test]
fn binary_runs_and_recomputes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("small.json");
    fs::write(&cfg_path, small().to_json()).unwrap();
    let out = dir.path().join("out");
    let o = bin().args(["run", "--config"]).arg(&cfg_path).env("SIDE_LAB_OUT", &out).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("high") && stdout.contains("AMS"), "{stdout}");
    let run_dir = out.join(small().run_name());
    let o = bin()
        .args(["metrics", "--config"])
        .arg(&cfg_path)
        .arg("--samples")
        .arg(run_dir.join("samples.csv"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m_dir = out.join(format!("metrics-{}", &small().hash()[..12]));
    assert_eq!(read(&m_dir, "metrics.csv"), read(&run_dir, "metrics.csv"));
    assert_eq!(read(&m_dir, "metrics.json"), read(&run_dir, "metrics.json"));
}

#[test]
fn binary_exit_codes_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"schema": 2, "seed": 0, "attack": "side"}"#).unwrap();
    let o = bin().args(["run", "--config"]).arg(&bad).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(Stage::Config.exit_code()));

    let mut cfg = small();
    cfg.surrogate.clusters = 2;
    cfg.surrogate.cohesion = 1.0;
    let path = dir.path().join("no-clusters.json");
    fs::write(&path, cfg.to_json()).unwrap();
    let o = bin().args(["run", "--config"]).arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(Stage::Surrogate.exit_code()));
    assert!(dir.path().join("failed").join(cfg.run_name()).join("error.txt").exists());

    let o = bin().args(["sweep", "--axis", "K"]).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(1), "K has no default grid");
}

#[test]
fn binary_default_config_round_trips() {
    for attack in ["side", "ga", "backdoor", "unconditional-baseline"] {
        let o = bin().args(["default-config", "--attack", attack]).output().unwrap();
        assert!(o.status.success());
        let cfg = ExperimentConfig::from_json(&String::from_utf8(o.stdout).unwrap()).unwrap();
        assert_eq!(cfg.data, ExperimentConfig::default().data);
    }
    let extra = r#"{"schema": 1, "seed": 0, "attack": "side", "surprise": 1}"#;
    assert!(ExperimentConfig::from_json(extra).is_err());
}

#[test]
fn ga_and_backdoor_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.ga.population = 6;
    cfg.ga.generations = 4;
    let path = dir.path().join("c.json");
    fs::write(&path, cfg.to_json()).unwrap();
    let o = bin().args(["ga", "--config"]).arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ga_cfg = ExperimentConfig { attack: Attack::Ga, ..cfg.clone() };
    let run = dir.path().join(ga_cfg.run_name());
    let v: serde_json::Value = serde_json::from_slice(&read(&run, "ga.json")).unwrap();
    assert_eq!(v["result"]["queries"].as_u64().unwrap(), 24);
    let hist = String::from_utf8(read(&run, "history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 5);
    assert!(hist.lines().last().unwrap().ends_with(",24"));

    cfg.backdoor.n_g = 10;
    cfg.backdoor.triggers = 2;
    fs::write(&path, cfg.to_json()).unwrap();
    let o = bin().args(["backdoor", "--config"]).arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bd_cfg = ExperimentConfig { attack: Attack::Backdoor, ..cfg };
    let v: serde_json::Value = serde_json::from_slice(&read(&dir.path().join(bd_cfg.run_name()), "backdoor.json")).unwrap();
    assert_eq!(v["triggers"].as_array().unwrap().len(), 2);
    assert_eq!(v["clean_prompts"].as_array().unwrap().len(), 10);
}
