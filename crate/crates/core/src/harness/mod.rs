//! Run orchestration: configuration, the staged pipeline, baselines,
//! transfer, checkpoints, metrics and saliency export.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod saliency;
pub mod transfer;

pub use baselines::{run_baselines, Baseline};
pub use checkpoint::{RunCheckpoint, Stage};
pub use config::RunConfig;
pub use metrics::{param_count, render_percentage, MetricsRecord, ParamCount};
pub use pipeline::{run_pipeline, PipelineOptions};
pub use saliency::export_saliency;
pub use transfer::{run_transfer, TransferMode};
