//! Similarity, memorisation scores and divergence estimates.
//!
//! Band tests are half-open `[lo, hi)` so that adjacent bands partition the
//! similarity scale; a band whose upper end reaches 1 (the largest value
//! either similarity can take) is closed at the top.

mod divergence;
mod memorization;
mod report;
mod similarity;

pub use divergence::{memorization_divergence, smoothed_log_density, theorem_gap, DivergenceEstimate, GapEstimate, DEFAULT_MC_SAMPLES};
pub use memorization::{
    ams, default_bands, evaluate, expected_unique, match_flag, match_set, percentile, percentile_similarity, ums,
    BandScore, Evaluation, MatchBand, NamedBand,
};
pub use report::{evaluation_rows, read_metric_rows, write_metric_rows, MetricRow, MetricsSummary};
pub use similarity::{similarity, Reference, SimilarityFn};
