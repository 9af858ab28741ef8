//! Weekly Counterpart and a per-region ridge regression baseline.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::split::origins;
use crate::error::{Error, Result};
use crate::synth::STEPS_PER_WEEK;

/// `ŷ(t + s) = y(t + s − 336)` for `s < horizon`.
pub fn weekly_counterpart(series: &[f64], t: usize, horizon: usize) -> Result<Vec<f64>> {
    if t < STEPS_PER_WEEK {
        return Err(Error::Invalid(format!("origin {t} has less than a week of history")));
    }
    if t + horizon > series.len() + STEPS_PER_WEEK {
        return Err(Error::Invalid(format!("horizon from {t} runs past the last observed week")));
    }
    Ok(series[t - STEPS_PER_WEEK..t - STEPS_PER_WEEK + horizon].to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearConfig {
    /// Ridge strength relative to the mean diagonal of the Gram matrix.
    pub ridge: f64,
    /// Steps between training origins.
    pub stride: usize,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self { ridge: 1e-2, stride: 4 }
    }
}

/// One centered least-squares map per region from the lookback window to the
/// horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseline {
    pub lookback: usize,
    pub horizon: usize,
    maps: Vec<RegionMap>,
}

#[derive(Debug, Clone, PartialEq)]
struct RegionMap {
    x_mean: DVector<f64>,
    y_mean: DVector<f64>,
    /// `L × T`
    w: DMatrix<f64>,
}

impl LinearBaseline {
    pub fn fit(series: &[Vec<f64>], train: Range<usize>, lookback: usize, horizon: usize, cfg: &LinearConfig) -> Result<Self> {
        if !(cfg.ridge >= 0.0) || cfg.stride == 0 {
            return Err(Error::Config("ridge must be non-negative and stride positive".into()));
        }
        let os = origins(train.clone(), lookback, horizon, cfg.stride);
        if os.is_empty() {
            return Err(Error::Invalid(format!("no training windows in steps {train:?}")));
        }
        let maps = series
            .iter()
            .map(|s| {
                let x = DMatrix::from_fn(os.len(), lookback, |i, j| s[os[i] - lookback + j]);
                let y = DMatrix::from_fn(os.len(), horizon, |i, j| s[os[i] + j]);
                fit_one(&x, &y, cfg.ridge)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { lookback, horizon, maps })
    }

    pub fn predict(&self, series: &[f64], region: usize, origin: usize) -> Result<Vec<f64>> {
        let m = self
            .maps
            .get(region)
            .ok_or_else(|| Error::Invalid(format!("no linear map for region index {region}")))?;
        if origin < self.lookback || origin > series.len() {
            return Err(Error::Invalid(format!("origin {origin} lacks a full lookback window")));
        }
        let x = DVector::from_column_slice(&series[origin - self.lookback..origin]) - &m.x_mean;
        let y = m.w.transpose() * x + &m.y_mean;
        Ok(y.iter().copied().collect())
    }
}

fn fit_one(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<RegionMap> {
    let n = x.nrows() as f64;
    let x_mean = DVector::from_fn(x.ncols(), |j, _| x.column(j).sum() / n);
    let y_mean = DVector::from_fn(y.ncols(), |j, _| y.column(j).sum() / n);
    let xc = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - x_mean[j]);
    let yc = DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] - y_mean[j]);
    let mut gram = xc.transpose() * &xc;
    let scale = gram.trace() / gram.nrows() as f64;
    if scale <= 0.0 {
        return Ok(RegionMap {
            x_mean,
            y_mean,
            w: DMatrix::zeros(x.ncols(), y.ncols()),
        });
    }
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge * scale + 1e-12 * scale;
    }
    let rhs = xc.transpose() * yc;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Invalid("ridge system is not positive definite".into()))?
        .solve(&rhs);
    Ok(RegionMap { x_mean, y_mean, w })
}
