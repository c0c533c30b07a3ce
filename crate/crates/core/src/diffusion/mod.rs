//! Forward and reverse VP-SDE machinery.
//!
//! The forward process uses a linear `beta(t)` on `t in [0, 1]`; the reverse
//! sampler is an Euler-Maruyama discretisation of the reverse-time SDE with an
//! optional classifier-guidance term `lambda * grad log p(c | x_t)`.

mod sampler;
mod schedule;
mod score;

pub use sampler::{
    forward_sample, reverse_sample, reverse_sample_final, reverse_sample_from, reverse_sample_with, GuidanceSpec,
    SamplerKind, Trajectory,
};
pub use schedule::NoiseSchedule;
pub use score::{
    BlendScoreModel, ConditionalKernelModel, ConditionalScore, GmmScoreModel, IsotropicMixture,
    KernelScoreModel, ScoreModel,
};
