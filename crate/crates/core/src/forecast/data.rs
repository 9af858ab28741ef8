//! Window extraction, normalization and batch assembly.

use std::cell::RefCell;
use std::collections::HashMap;

use chrono::NaiveDateTime;
use mvgr_tensor::Tensor;

use super::describe::describe_series;
use super::patch::PatchSpec;
use crate::error::{Error, Result};
use crate::poi::{HashedEmbedder, TextEmbedder};
use crate::synth::{ExogenousPanel, Indicator, SeriesPanel};

/// Per-window z-score statistics of the indicator lookback.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub mean: f64,
    pub sd: f64,
}

impl WindowStats {
    pub fn of(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, sd }
    }

    /// Divisor used for normalization; flat windows fall back to 1.
    pub fn scale(&self) -> f64 {
        if self.sd > 1e-9 {
            self.sd
        } else {
            1.0
        }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale()
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        self.mean + self.scale() * z
    }
}

/// Exogenous covariates mapped to model inputs: `ln(1 + mm)` for rain and
/// `code / n_types` for the categorical channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ExoChannels {
    pub rain: Vec<Vec<f64>>,
    pub holiday: Vec<f64>,
    pub event: Vec<Vec<f64>>,
}

impl ExoChannels {
    pub fn from_panel(exo: &ExogenousPanel) -> Self {
        let nh = f64::from(exo.n_holiday_types.max(1));
        let ne = f64::from(exo.n_event_types.max(1));
        Self {
            rain: exo.rainfall.iter().map(|r| r.iter().map(|v| v.ln_1p()).collect()).collect(),
            holiday: exo.holiday.iter().map(|&h| f64::from(h) / nh).collect(),
            event: exo.event.iter().map(|r| r.iter().map(|&e| f64::from(e) / ne).collect()).collect(),
        }
    }
}

/// Everything the forecaster consumes for one indicator.
pub struct ForecastData {
    pub indicator: Indicator,
    pub start: NaiveDateTime,
    pub region_ids: Vec<usize>,
    pub series: Vec<Vec<f64>>,
    pub channels: ExoChannels,
    /// County embeddings, one row per region.
    pub h: Tensor,
    pub spec: PatchSpec,
    embedder: HashedEmbedder,
    text_cache: RefCell<HashMap<(usize, usize), Vec<f64>>>,
}

/// A batch of whole origins: every region of each origin, origin-major.
#[derive(Debug, Clone)]
pub struct ForecastBatch {
    pub x: Tensor,
    pub rain: Tensor,
    pub holiday: Tensor,
    pub event: Tensor,
    pub h: Tensor,
    pub text: Tensor,
    /// `(start, len)` row ranges sharing one origin.
    pub groups: Vec<(usize, usize)>,
    pub stats: Vec<WindowStats>,
    pub samples: Vec<(usize, usize)>,
    /// Normalized horizon targets when available.
    pub target: Option<Tensor>,
}

impl ForecastBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

impl ForecastData {
    pub fn new(panel: &SeriesPanel, exo: &ExogenousPanel, indicator: Indicator, h: Tensor, spec: PatchSpec) -> Result<Self> {
        spec.validate()?;
        panel.validate()?;
        exo.validate(panel)?;
        if h.rows() != panel.n_regions() {
            return Err(Error::Shape(format!("{} embedding rows for {} regions", h.rows(), panel.n_regions())));
        }
        if h.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("county embeddings contain non-finite values".into()));
        }
        Ok(Self {
            indicator,
            start: panel.start,
            region_ids: panel.region_ids.clone(),
            series: panel.indicator(indicator).to_vec(),
            channels: ExoChannels::from_panel(exo),
            h,
            spec,
            embedder: HashedEmbedder::default(),
            text_cache: RefCell::new(HashMap::new()),
        })
    }

    pub fn n_regions(&self) -> usize {
        self.series.len()
    }

    pub fn steps(&self) -> usize {
        self.series.first().map_or(0, Vec::len)
    }

    pub fn text_dim(&self) -> usize {
        self.embedder.dim()
    }

    fn text_feature(&self, region: usize, origin: usize) -> Vec<f64> {
        if let Some(v) = self.text_cache.borrow().get(&(region, origin)) {
            return v.clone();
        }
        let w = &self.series[region][origin - self.spec.lookback..origin];
        let v = self.embedder.embed(&describe_series(w, self.indicator.name()));
        self.text_cache.borrow_mut().insert((region, origin), v.clone());
        v
    }

    /// Assembles whole origins. Exogenous windows end at the horizon end, so
    /// they carry the known future covariates; with `exogenous = false` they
    /// are all zero.
    pub fn batch(&self, origins: &[usize], exogenous: bool, with_target: bool) -> Result<ForecastBatch> {
        let (l, t) = (self.spec.lookback, self.spec.horizon);
        let n_r = self.n_regions();
        let n = origins.len() * n_r;
        let mut x = Vec::with_capacity(n * l);
        let mut rain = Vec::with_capacity(n * l);
        let mut hol = Vec::with_capacity(n * l);
        let mut ev = Vec::with_capacity(n * l);
        let mut text = Vec::with_capacity(n * self.text_dim());
        let mut hrows = Vec::with_capacity(n * self.h.cols());
        let mut target = Vec::with_capacity(n * t);
        let mut stats = Vec::with_capacity(n);
        let mut samples = Vec::with_capacity(n);
        let mut groups = Vec::with_capacity(origins.len());
        for &o in origins {
            if o < l || o + t > self.steps() {
                return Err(Error::Invalid(format!(
                    "origin {o} needs {l} steps of history and {t} steps of horizon within {} steps",
                    self.steps()
                )));
            }
            groups.push((samples.len(), n_r));
            for r in 0..n_r {
                let w = &self.series[r][o - l..o];
                if w.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Invalid(format!("non-finite value in region {} window at origin {o}", self.region_ids[r])));
                }
                let s = WindowStats::of(w);
                x.extend(w.iter().map(|&v| s.normalize(v)));
                let er = o + t - l..o + t;
                if exogenous {
                    rain.extend_from_slice(&self.channels.rain[r][er.clone()]);
                    hol.extend_from_slice(&self.channels.holiday[er.clone()]);
                    ev.extend_from_slice(&self.channels.event[r][er]);
                } else {
                    rain.extend(std::iter::repeat_n(0.0, l));
                    hol.extend(std::iter::repeat_n(0.0, l));
                    ev.extend(std::iter::repeat_n(0.0, l));
                }
                text.extend(self.text_feature(r, o));
                hrows.extend_from_slice(self.h.row_slice(r));
                if with_target {
                    target.extend(self.series[r][o..o + t].iter().map(|&v| s.normalize(v)));
                }
                stats.push(s);
                samples.push((r, o));
            }
        }
        Ok(ForecastBatch {
            x: Tensor::matrix(n, l, x),
            rain: Tensor::matrix(n, l, rain),
            holiday: Tensor::matrix(n, l, hol),
            event: Tensor::matrix(n, l, ev),
            h: Tensor::matrix(n, self.h.cols(), hrows),
            text: Tensor::matrix(n, self.text_dim(), text),
            groups,
            stats,
            samples,
            target: with_target.then(|| Tensor::matrix(n, t, target)),
        })
    }
}
