//! Reports and CSV exports. Every metric is recomputed from prediction rows.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::Datelike;
use serde::{Deserialize, Serialize};

use super::experiment::{Dataset, ExperimentConfig};
use super::metrics::{is_effective, mae, wmape};
use crate::error::{io_err, Error, Result};
use crate::forecast::Toggles;
use crate::synth::{format_timestamp, Indicator};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const SERIES_EXPORT_CSV: &str = "series_export.csv";

/// One forecast value. `region` is the panel row index.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub model: String,
    pub indicator: Indicator,
    pub region: usize,
    pub origin: usize,
    pub step: usize,
    pub actual: f64,
    pub prediction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// All counties pooled.
    Pooled,
    /// Unweighted mean of the per-county metrics.
    CountyMean,
    Archetype,
    County,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub indicator: Indicator,
    pub model: String,
    pub scope: Scope,
    /// Archetype name or region id; empty for the aggregate scopes.
    pub key: String,
    pub wmape: f64,
    pub mae: f64,
    /// Effective-window slots behind the metric.
    pub slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub indicator: Indicator,
    pub model: String,
    pub toggles: Toggles,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val_wmape: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seed: u64,
    pub test_start: String,
    pub test_end: String,
    pub metrics: Vec<MetricRow>,
    pub runs: Vec<RunSummary>,
    /// Not part of the reproducible content.
    pub wall_clock_secs: f64,
}

#[derive(Default)]
struct Acc {
    y: Vec<f64>,
    yhat: Vec<f64>,
}

impl Acc {
    fn row(&self, indicator: Indicator, model: &str, scope: Scope, key: String) -> Result<MetricRow> {
        Ok(MetricRow {
            indicator,
            model: model.to_string(),
            scope,
            key,
            wmape: wmape(&self.y, &self.yhat, None)?,
            mae: mae(&self.y, &self.yhat, None)?,
            slots: self.y.len(),
        })
    }
}

impl Report {
    pub fn from_predictions(rows: &[PredictionRow], data: &Dataset, cfg: &ExperimentConfig) -> Result<Self> {
        let archetypes = data.city.archetypes();
        let mut groups: BTreeMap<(Indicator, String), (Acc, BTreeMap<String, Acc>, Vec<Acc>)> = BTreeMap::new();
        let (mut first, mut last) = (usize::MAX, 0);
        for r in rows {
            if !is_effective(data.panel.timestamp(r.step)) {
                continue;
            }
            first = first.min(r.step);
            last = last.max(r.step);
            let (pooled, by_arch, by_county) = groups
                .entry((r.indicator, r.model.clone()))
                .or_insert_with(|| (Acc::default(), BTreeMap::new(), (0..data.panel.n_regions()).map(|_| Acc::default()).collect()));
            let arch = by_arch.entry(archetypes[r.region].name().to_string()).or_default();
            for acc in [pooled, arch, &mut by_county[r.region]] {
                acc.y.push(r.actual);
                acc.yhat.push(r.prediction);
            }
        }
        if groups.is_empty() {
            return Err(Error::Invalid("no predictions fall in the evaluation window".into()));
        }
        let mut metrics = Vec::new();
        for ((ind, model), (pooled, by_arch, by_county)) in &groups {
            metrics.push(pooled.row(*ind, model, Scope::Pooled, String::new())?);
            let counties: Vec<MetricRow> = by_county
                .iter()
                .enumerate()
                .filter(|(_, a)| !a.y.is_empty())
                .map(|(r, a)| a.row(*ind, model, Scope::County, data.panel.region_ids[r].to_string()))
                .collect::<Result<_>>()?;
            let n = counties.len() as f64;
            metrics.push(MetricRow {
                indicator: *ind,
                model: model.clone(),
                scope: Scope::CountyMean,
                key: String::new(),
                wmape: counties.iter().map(|c| c.wmape).sum::<f64>() / n,
                mae: counties.iter().map(|c| c.mae).sum::<f64>() / n,
                slots: pooled.y.len(),
            });
            for (name, a) in by_arch {
                metrics.push(a.row(*ind, model, Scope::Archetype, name.clone())?);
            }
            metrics.extend(counties);
        }
        Ok(Self {
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            test_start: format_timestamp(data.panel.timestamp(first)),
            test_end: format_timestamp(data.panel.timestamp(last)),
            metrics,
            runs: Vec::new(),
            wall_clock_secs: 0.0,
        })
    }

    pub fn pooled(&self, indicator: Indicator, model: &str) -> Option<&MetricRow> {
        self.metrics
            .iter()
            .find(|m| m.indicator == indicator && m.model == model && m.scope == Scope::Pooled)
    }

    /// Copy with the wall-clock field cleared, for comparisons.
    pub fn reproducible(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }

    /// Writes `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(REPORT_JSON);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(io_err(&path))?;
        let mut w = csv::Writer::from_path(dir.join(REPORT_CSV))?;
        w.write_record(["indicator", "model", "scope", "key", "wmape", "mae", "slots"])?;
        for m in &self.metrics {
            let scope = serde_json::to_value(m.scope)?;
            w.write_record([
                m.indicator.name().to_string(),
                m.model.clone(),
                scope.as_str().unwrap_or_default().to_string(),
                m.key.clone(),
                m.wmape.to_string(),
                m.mae.to_string(),
                m.slots.to_string(),
            ])?;
        }
        w.flush().map_err(io_err(dir.join(REPORT_CSV)))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path).map_err(io_err(path))?)?)
    }
}

/// `model,indicator,region_id,origin,timestamp,actual,prediction,effective`
pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow], data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "indicator", "region_id", "origin", "timestamp", "actual", "prediction", "effective"])?;
    for r in rows {
        let ts = data.panel.timestamp(r.step);
        w.write_record([
            r.model.clone(),
            r.indicator.name().to_string(),
            data.panel.region_ids[r.region].to_string(),
            format_timestamp(data.panel.timestamp(r.origin)),
            format_timestamp(ts),
            r.actual.to_string(),
            r.prediction.to_string(),
            u8::from(is_effective(ts)).to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Plot-ready rows for one model next to the Weekly Counterpart:
/// `timestamp,region_id,indicator,actual,prediction,weekly_counterpart,rainfall_mm,weekend`
pub fn write_series_export(path: &Path, rows: &[PredictionRow], model: &str, reference: &str, data: &Dataset) -> Result<()> {
    let key = |r: &PredictionRow| (r.indicator, r.region, r.step);
    let refs: BTreeMap<_, f64> = rows.iter().filter(|r| r.model == reference).map(|r| (key(r), r.prediction)).collect();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["timestamp", "region_id", "indicator", "actual", "prediction", "weekly_counterpart", "rainfall_mm", "weekend"])?;
    for r in rows.iter().filter(|r| r.model == model) {
        let ts = data.panel.timestamp(r.step);
        let reference = refs.get(&key(r)).map_or(String::new(), f64::to_string);
        w.write_record([
            format_timestamp(ts),
            data.panel.region_ids[r.region].to_string(),
            r.indicator.name().to_string(),
            r.actual.to_string(),
            r.prediction.to_string(),
            reference,
            data.exo.rainfall[r.region][r.step].to_string(),
            u8::from(ts.weekday().number_from_monday() >= 6).to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}
