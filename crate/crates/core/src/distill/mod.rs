//! Toy-scale knowledge distillation: a teacher/student pair of small
//! next-token models, the soft/hard hybrid loss, and low-rank adapter
//! fine-tuning over frozen base weights.

pub mod grammar;
pub mod math;
pub mod model;
pub mod store;
pub mod train;

pub use grammar::{context_window, MarkovGrammar, TrainingPair};
pub use math::{
    cross_entropy, hybrid_loss, hybrid_loss_grad, kl_divergence, log_softmax, softmax,
    TokenDistribution,
};
pub use model::{
    adapter_grads, backward, lora_effective, EffectiveWeights, LowRankAdapter, ModelAdapters,
    ModelConfig, ModelGrads, ToyModelParams,
};
pub use store::{load_store, save_store, SoftLabelStore};
pub use train::{distill_dataset, evaluate_ce, train_adapter, train_full, TrainSettings};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("not a probability distribution: {reason}")]
    NotADistribution { reason: String },
    #[error("distributions cover different vocabularies: {p} vs {q}")]
    VocabularyMismatch { p: usize, q: usize },
    #[error("P has mass at index {index} where Q has none")]
    SupportMismatch { index: usize },
    #[error("hard label {index} outside vocabulary of {vocab}")]
    BadHardLabel { index: usize, vocab: usize },
    #[error("bad hyperparameters: alpha {alpha}, temperature {temperature}")]
    BadHyperparameter { alpha: f64, temperature: f64 },
    #[error("bad model config: {reason}")]
    BadModelConfig { reason: String },
    #[error("rank {rank} invalid for a {d_out}x{d_in} matrix")]
    BadRank {
        rank: usize,
        d_out: usize,
        d_in: usize,
    },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("training pair has an empty target")]
    EmptyTarget,
    #[error("token outside vocabulary")]
    TokenOutOfVocab,
    #[error("loss diverged (NaN or infinite) at step {step}")]
    DivergenceDetected { step: usize },
    #[error("soft labels missing for pair {pair_index} position {position}")]
    MissingSoftLabels { pair_index: usize, position: usize },
    #[error("soft-label store malformed: {reason}")]
    StoreFormat { reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
