//! Optimisation, the two-phase training loop and checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, sha256_hex, Checkpoint};
pub use optim::{class_weights, cosine_lr, early_stop, AdamW, CosineWarmRestarts, Moments};
pub use trainer::{
    dataset_logits, dataset_scores, history_csv, EpochOutcome, EpochRecord, LossWeights, Phase, PhaseBudget,
    TrainConfig, TrainState, Trainer, HISTORY_HEADER,
};
