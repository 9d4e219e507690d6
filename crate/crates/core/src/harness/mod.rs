//! Training, evaluation and qualitative overlays.

mod config;
mod eval;
mod overlay;
mod train;

pub use config::{deterministic_mode, poly_lr, DataSource, Stage, TrainConfig, DETERMINISTIC_ENV};
pub use eval::{evaluate, evaluate_checkpoint, full_lexicon, ground_truth, predictions, score};
pub use overlay::render_overlay;
pub use train::{seeds, train, StepLog, TrainData, Trainer, FINAL_CHECKPOINT, LOSS_LOG_FILE};
