//! Small trainable networks with hand-written backpropagation.
//!
//! The time-dependent classifier supplies `grad log p_t(y | x)` for guidance;
//! the low-rank adapters turn an unconditional noise-prediction network into a
//! class-conditional one without touching its weights. The Bayes classifier
//! is the exact posterior under per-class kernel models and serves as the
//! reference the trained networks are compared against.

pub mod checkpoint;
mod classifier;
mod lora;
mod mlp;

pub use classifier::{
    classifier_grad, train_time_classifier, BayesTimeClassifier, NeuralTimeClassifier, TimeClassifier,
    TrainConfig,
};
pub use lora::{continue_finetune, lora_finetune, train_score_net, LoraScoreNet, ScoreNet};
pub use mlp::{time_embedding, Adam, AdapterView, Gradients, Mlp, Trace, TIME_FEATURES};
