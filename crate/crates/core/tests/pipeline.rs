//! The extraction pipeline driven through the public API only.

use side_core::diffusion::{KernelScoreModel, NoiseSchedule, SamplerKind, ScoreModel};
use side_core::extraction::{read_samples_csv, side_extract, unconditional_extract, write_samples_csv, ExtractionConfig, GuidanceSource};
use side_core::metrics::{evaluate, MatchBand, NamedBand, SimilarityFn};
use side_core::neural::{BayesTimeClassifier, TimeClassifier};
use side_core::rng::{standard_normal, stream};
use side_core::surrogate::{build_labeled_dataset, ClusterModel, FeatureMap, SurrogateConfig};
use side_core::Sample;

/// Four tight groups of five points each, far from the origin and each other.
fn training() -> Vec<Sample> {
    let centers = [[8.0, 0.0], [0.0, 8.0], [-8.0, 0.0], [0.0, -8.0]];
    let mut r = stream(31, 0);
    centers
        .iter()
        .flat_map(|c| (0..5).map(|_| standard_normal(&mut r, 2).iter().zip(c).map(|(z, m)| m + 0.4 * z).collect::<Sample>()).collect::<Vec<_>>())
        .collect()
}

fn extraction(n_g: usize, lambda: f64, schedule: &NoiseSchedule) -> ExtractionConfig {
    ExtractionConfig { n_g, lambda, schedule: schedule.clone(), sampler: SamplerKind::EulerMaruyama, seed: 8, fixed_target: Some(0) }
}

#[test]
fn surrogate_labels_steer_a_memorising_model() {
    let s = NoiseSchedule::new(200, 0.1, 20.0).unwrap();
    let train = training();
    let model = KernelScoreModel::new(&train, 0.01, s.clone()).unwrap();

    let synthetic = unconditional_extract(&model, &extraction(400, 0.0, &s)).unwrap().samples();
    let cfg = SurrogateConfig { clusters: 4, cohesion: 0.9, features: FeatureMap::identity(false), seed: 2 };
    let (clusters, labeled) = build_labeled_dataset(&synthetic, &cfg).unwrap();
    assert_eq!(clusters.kept_count(), 4);
    let back = ClusterModel::from_json(&clusters.to_json().unwrap()).unwrap();
    assert_eq!(back.kept_ids, clusters.kept_ids);

    let clf = BayesTimeClassifier::fit(&labeled, clusters.kept_count(), 0.05, s.clone()).unwrap();
    assert_eq!(clf.num_classes(), 4);
    let run = side_extract(&model, GuidanceSource::Classifier(&clf), 4, &extraction(200, 4.0, &s)).unwrap();
    assert_eq!(run.diverged(), 0);

    // Every guided sample should land in the group that cluster 0 covers.
    let centroid = &clusters.kept_centroids()[0];
    let near = |x: &Sample| x.iter().zip(centroid.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < 3.0;
    let hits = run.samples().iter().filter(|x| near(x)).count();
    assert!(hits >= 190, "{hits}/200 in the target group");

    // A memoriser reproduces training points, so nearly everything is a copy.
    let bands = vec![NamedBand::new("copy", 0.99, 1.0).unwrap()];
    let eval = evaluate(&run.samples(), &train, &bands, &SimilarityFn::NegNormalizedL2).unwrap();
    assert!(eval.bands[0].ams > 0.95, "{}", eval.bands[0].ams);
    assert!(eval.bands[0].ums <= 5.0 / 200.0 + 1e-12, "only one group of five can be matched");
    assert!(MatchBand::new(0.99, 1.0).unwrap().contains(1.0));

    let mut buf = Vec::new();
    write_samples_csv(&mut buf, &run.records).unwrap();
    let rows = read_samples_csv(buf.as_slice()).unwrap();
    assert_eq!(rows.len(), 200);
    for (row, rec) in rows.iter().zip(&run.records) {
        assert_eq!((row.0, row.1, &row.2), (rec.index, rec.cluster, &rec.x0));
    }
    assert_eq!(model.dim(), 2);
}
