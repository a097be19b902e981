//! Optimization: Adam, plateau decay, checkpoints and the epoch loop.

mod adam;
mod checkpoint;
mod plateau;
mod trainer;

pub use adam::{adam_update, AdamState, BETA1, BETA2, EPS};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use plateau::PlateauState;
pub use trainer::{
    evaluate_split, fine_tune, metrics_csv, resume, train_model, write_metrics_csv, EpochMetrics, Stage,
    TrainConfig, TrainData, TrainOutcome,
};
