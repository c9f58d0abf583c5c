//! Synthetic-scene generation, run configuration, metrics reporting, and
//! the augment/train/gradcheck/diagnose pipelines behind the CLI.

mod config;
mod metrics;
mod pipeline;
mod scene;

pub use config::{ConfigError, RunConfig};
pub use metrics::{MetricsReport, StepMetrics, Summary};
pub use pipeline::{cmd_augment, cmd_diagnose, cmd_gradcheck, cmd_train, EvalOutcome, HarnessError, TrainOutput};
pub use scene::{gen_scenes, scene_rois, SyntheticScene, N_CATEGORIES};
