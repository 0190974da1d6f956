//! Model assembly, differentiation harness, training and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod fd;
pub mod gradcheck;
pub mod model;
pub mod stats;
pub mod train;

pub use checkpoint::{
    decode_checkpoint, encode_model, encode_trainer, load_checkpoint, load_into, save_checkpoint, save_training, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, Positional};
pub use data::{Batch, WindowDataset};
pub use fd::{fd_check, numeric_gradient, relative_error, FdMode, FdReport, ABS_FLOOR};
pub use model::{CategoryForecast, ForwardPass, PaNet};
pub use train::{
    clip_gradients, log_csv, loss_graph, pixel_weights, reference_rate, routing_diagnostics, EpochRecord, LossVars, Optimizer,
    OptimizerKind, StepOutcome, TrainConfig, Trainer, DIVERGENCE_LIMIT, TRAIN_LOG_HEADER,
};
pub use gradcheck::{check_model_gradients, GradCheck, TIE_MARGIN};
pub use stats::{
    category_accuracy, forecast_dataset, route_statistics, DatasetForecast, RouteReport, TierStats, ROUTE_HEADER,
    TIER_HEADER,
};
