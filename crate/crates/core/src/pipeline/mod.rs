//! Configuration, storage, training, inference, evaluation and reporting.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod report;

pub use checkpoint::Checkpoint;
pub use config::{DatasetConfig, OptimizerConfig, RunConfig, TrainConfig};
pub use data::{synth_data, Dataset, Manifest, ManifestEntry, Split, Utterance};
pub use model::{note_constraint, read_log, write_log, InferOptions, Inference, LogRow, Model, Params};
pub use eval::{EvalReport, Evaluator, MetricRow, MCD_ORDER};
