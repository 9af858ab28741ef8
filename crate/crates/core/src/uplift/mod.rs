//! Multi-treatment uplift modelling on top of region embeddings.

mod data;
mod model;
mod qini;
mod report;
mod treatment;

pub use data::{
    augment_features, conversion_probability, generate_uplift, read_samples_csv, treatment_depth, write_samples_csv, UpliftData,
    UpliftGenConfig, UpliftSample, SAMPLES_CSV,
};
pub use model::{train_uplift, MultiHeadModel, UpliftTrainConfig, UpliftTrainLog};
pub use qini::{qini, qini_curve, qini_permutation_null};
pub use report::{evaluate_qini, QiniReport, TreatmentQini, QINI_REPORT_JSON};
pub use treatment::TreatmentSet;
