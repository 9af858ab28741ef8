//! Stage-2 forecasting: patch encoders, series descriptions, the prompt pool,
//! cross-modal fusion, the frozen backbone with low-rank adapters, and training.

mod backbone;
mod data;
mod describe;
mod lora;
mod model;
mod patch;
mod prompt;
mod train;

pub use backbone::{
    causal_blocks, pretrain_backbone, synthetic_corpus, Backbone, BackboneCheckpoint, BackboneConfig, BackboneLayer,
    BackbonePretrainConfig, BackbonePretrainLog, LayerAdapters,
};
pub use data::{ExoChannels, ForecastBatch, ForecastData, WindowStats};
pub use describe::{autocorrelation, describe_series, series_stats, Noise, Periodicity, SeriesStats, Stability, Trend};
pub use lora::{lora_linear, LoraAdapter};
pub use model::{cross_modal_fuse, forecast_loss, CrossModal, ForecastConfig, ForecastVars, Forecaster, Toggles};
pub use patch::{PatchEncoder, PatchOutput, PatchSpec};
pub use prompt::{top_k_indices, PromptOutput, PromptPool};
pub use train::{build_forecaster, forecast_wmape, load_forecaster, predict, save_forecaster, train_forecaster, ForecastTrainLog, RegionForecast, TrainedForecaster};
