use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::UpliftData;
use super::model::MultiHeadModel;
use super::qini::{qini, qini_permutation_null};
use crate::error::{io_err, Error, Result};

pub const QINI_REPORT_JSON: &str = "qini_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentQini {
    pub treatment: String,
    pub treated: usize,
    pub control: usize,
    pub qini: f64,
    /// 2.5% and 97.5% quantiles of the coefficient under shuffled scores.
    pub null_low: f64,
    pub null_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QiniReport {
    pub control: String,
    pub embedding_dim: usize,
    pub samples: usize,
    pub permutations: usize,
    pub treatments: Vec<TreatmentQini>,
    pub mean_qini: f64,
}

impl QiniReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// QINI of each treatment against control on `data`, scoring by the model's
/// uplift for that treatment.
pub fn evaluate_qini(model: &MultiHeadModel, data: &UpliftData, permutations: usize, seed: u64) -> Result<QiniReport> {
    if data.treatments != model.treatments {
        return Err(Error::Invalid("data and model use different treatment sets".into()));
    }
    if permutations == 0 {
        return Err(Error::Invalid("at least one permutation is needed".into()));
    }
    let features: Vec<Vec<f64>> = data.samples.iter().map(|s| s.features.clone()).collect();
    let probs = model.predict(&features)?;
    let mut rows = Vec::new();
    for t in 1..data.treatments.len() {
        let idx: Vec<usize> = (0..data.samples.len()).filter(|&i| data.samples[i].treatment == 0 || data.samples[i].treatment == t).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| probs[i][t] - probs[i][0]).collect();
        let outcomes: Vec<bool> = idx.iter().map(|&i| data.samples[i].converted).collect();
        let arms: Vec<usize> = idx.iter().map(|&i| data.samples[i].treatment).collect();
        let control = arms.iter().filter(|&&a| a == 0).count();
        let mut null = qini_permutation_null(&scores, &outcomes, &arms, 0, permutations, seed.wrapping_add(t as u64))?;
        null.sort_by(f64::total_cmp);
        rows.push(TreatmentQini {
            treatment: data.treatments.name(t).to_string(),
            treated: arms.len() - control,
            control,
            qini: qini(&scores, &outcomes, &arms, 0)?,
            null_low: quantile(&null, 0.025),
            null_high: quantile(&null, 0.975),
        });
    }
    let mean_qini = rows.iter().map(|r| r.qini).sum::<f64>() / rows.len() as f64;
    Ok(QiniReport {
        control: data.treatments.control().to_string(),
        embedding_dim: model.embedding_dim,
        samples: data.samples.len(),
        permutations,
        treatments: rows,
        mean_qini,
    })
}
