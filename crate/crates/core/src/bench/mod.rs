//! Supervised class-incremental benchmark with reservoir replay.

mod buffer;
mod metrics;
mod train;

pub use buffer::{reservoir_insert, ReplayBuffer};
pub use metrics::{compute_metrics, CLRunRecord, ClMetrics};
pub use train::{evaluate_class_il, train_er, train_meml_cl, train_naive, ClBenchmark, ClTrainConfig};
