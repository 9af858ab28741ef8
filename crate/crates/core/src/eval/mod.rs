//! Metrics, baselines, splits and experiment runners.

mod baselines;
mod experiment;
mod metrics;
mod report;
mod split;

pub use baselines::{weekly_counterpart, LinearBaseline, LinearConfig};
pub use experiment::{
    pretrain_all, pretrain_stage1, run_experiment, split_origins, test_origins, train_variant, Dataset, ExperimentConfig,
    ExperimentOutput, Pretrained, SplitOrigins, Variant, ACTIVITY_CSV, BACKBONE_DIR, CITY_DIR, LINEAR, PANEL_CSV, STAGE1_DIR,
    WEEKLY_COUNTERPART,
};
pub use metrics::{effective_mask, is_effective, mae, wmape, SLOTS_PER_DAY_IN_WINDOW, WINDOW_FIRST_SLOT, WINDOW_LAST_SLOT};
pub use report::{
    write_predictions_csv, write_series_export, MetricRow, PredictionRow, Report, RunSummary, Scope, PREDICTIONS_CSV,
    REPORT_CSV, REPORT_JSON, SERIES_EXPORT_CSV,
};
pub use split::{origins, SplitSpec, Splits};
