//! Loss, optimiser, metrics, checkpoints, the training loop and the
//! verification harnesses.

pub mod checkpoint;
pub mod fitdemo;
mod loss;
mod metrics;
mod optim;
mod trainer;
pub mod verify;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use loss::bce_loss;
pub use metrics::auc;
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{evaluate, history_csv, predict, train, write_history, EpochRecord, Evaluation, TrainConfig};
