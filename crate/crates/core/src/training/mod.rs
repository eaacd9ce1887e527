//! AdamW, learning-rate schedules, the classification training loop with
//! best-of-runs selection, and masked-token pretraining.

mod config;
mod optim;
mod pretrain;
mod trainer;

pub use config::{cosine_lr, scheduled_lr, Method, TrainConfig};
pub use optim::{clip_grad_norm, AdamW};
pub use pretrain::{pretrain_mlm, PretrainConfig, PretrainOutcome, PretrainRecord};
pub use trainer::{
    param_checksum, select_best, split_validation, train, train_best_of, write_history, BestOf,
    HistoryRecord, RunSummary, Sample, TrainOutcome,
};
