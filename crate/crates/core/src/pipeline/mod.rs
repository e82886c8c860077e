//! Experiment plumbing behind the `deco` command line: synthetic dataset
//! generation, training with checkpoints, evaluation, inference and dataset
//! statistics.

mod config;
mod evaluate;
mod generate;
mod samples;
mod train;

pub use config::{OptimizerConfig, OptimizerKind, Profile, TrainConfig};
pub use evaluate::{
    cmd_eval, cmd_infer, cmd_stats, evaluate_predictor, labeled, rendered_map_bce, ConstantPredictor, ContactPredictor,
    DatasetStats, FrequencyBaseline, InferOutput, DEFAULT_MIN_PART_VERTICES, INFER_JSON, INFER_PLY, STATS_JSON,
    STATS_PLY,
};
pub use generate::{cmd_generate, load_dataset_template, read_body, GenerateOptions, SYNTH_CONFIG_FILE, TEMPLATE_FILE};
pub use samples::{batch_targets, load_image, prepare_record, prepare_split, stack_images, PreparedSample};
pub use train::{
    cmd_train, read_log, AdamState, Checkpoint, LogRecord, TrainOutcome, Trainer, CHECKPOINT_FILE,
    CHECKPOINT_SCHEMA_VERSION, LOG_FILE,
};
