//! Training, evaluation, checkpointing and reporting around the classifier.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod kfold;
pub mod metrics;
pub mod model;
pub mod report;
pub mod train;

pub use checkpoint::{load_checkpoint, load_language_model, save_checkpoint, save_language_model, Checkpoint};
pub use config::TrainConfig;
pub use dataset::{decode_image, generate_synthetic_dataset, ingest_dataset, Dataset, Provenance};
pub use kfold::{kfold_split, Fold};
pub use metrics::{read_metrics_csv, write_metrics_csv, MetricRow, Metrics};
pub use model::{evaluate_model, predict, predict_batch, Model, Prediction, Selection};
pub use train::{pretrain_language_model, train_model, train_with_language_model, EpochReport, FoldOutcome, FoldTrainer, PreparedData, TrainOutcome};
pub use report::{build_report, ReportFiles};
pub use gradcheck::{gradcheck_module, GradReport, GRADCHECK_MODULES};
