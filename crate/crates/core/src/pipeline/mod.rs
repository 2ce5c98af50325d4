//! Loss, optimizer, training loop and segmentation metrics.

pub mod metrics;
pub mod optim;
pub mod train;

pub use metrics::{confusion, Confusion, Metrics, MetricsReport, SampleMetrics};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use train::{
    evaluate, history_csv, predict_masks, score, train, train_step, EpochRecord, TrainConfig, TrainOutcome,
    HISTORY_HEADER,
};
