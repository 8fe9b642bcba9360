//! Training, cross-validation, metrics, checkpoints and heatmap export.

pub mod checkpoint;
pub mod cv;
pub mod heatmap;
pub mod metrics;
pub mod optim;
pub mod prepare;

pub use checkpoint::{config_hash, load_compatible, read_checkpoint, write_checkpoint};
pub use cv::{monte_carlo_cv, monte_carlo_splits, predict_slides, score_predictions, train_model, CvOutcome, EvalReport, FoldReport, SlidePrediction, Split, TrainConfig, TrainedModel};
pub use heatmap::{heatmap_export, render, top_decile, Heatmap};
pub use metrics::{auc, auc_binary, metrics, Metrics};
pub use optim::{AdamW, AdamWSettings};
pub use prepare::{prepare_cohort, prepare_slide, PrepConfig, PreparedSlide};
