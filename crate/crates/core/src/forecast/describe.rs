//! Templated natural-language description of a series window.

use serde::{Deserialize, Serialize};

use crate::synth::Indicator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trend {
    Increasing,
    Decreasing,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Periodicity {
    Daily,
    Weekly,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Constant,
    Stable,
    Moderate,
    Volatile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Noise {
    None,
    Low,
    Moderate,
    High,
}

/// Statistics behind a description. All of them are computed on the window
/// rescaled to `[0, 1]`, so they do not change under positive affine maps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesStats {
    pub slope: f64,
    pub acf_daily: Option<f64>,
    pub acf_weekly: Option<f64>,
    pub cv: f64,
    pub residual_ratio: f64,
    pub trend: Trend,
    pub periodicity: Periodicity,
    pub stability: Stability,
    pub noise: Noise,
}

const DAY: usize = 48;
const WEEK: usize = 336;

/// Correlation between the window and itself shifted by `lag`, over the
/// overlapping part. `None` when the window is too short or a part is flat.
pub fn autocorrelation(x: &[f64], lag: usize) -> Option<f64> {
    if lag == 0 || lag + 1 >= x.len() {
        return None;
    }
    let (a, b) = (&x[lag..], &x[..x.len() - lag]);
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (p, q) in a.iter().zip(b) {
        cov += (p - ma) * (q - mb);
        va += (p - ma).powi(2);
        vb += (q - mb).powi(2);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

fn rescale(window: &[f64]) -> Vec<f64> {
    let lo = window.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        window.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; window.len()]
    }
}

fn ls_slope(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let tm = (n - 1.0) / 2.0;
    let xm = x.iter().sum::<f64>() / n;
    let num: f64 = x.iter().enumerate().map(|(t, v)| (t as f64 - tm) * (v - xm)).sum();
    let den: f64 = (0..x.len()).map(|t| (t as f64 - tm).powi(2)).sum();
    num / den
}

/// Variance left after subtracting the per-phase mean at `period`, relative to
/// the total variance.
fn residual_ratio(x: &[f64], period: Option<usize>) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let total: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let fitted: Vec<f64> = match period {
        Some(p) => {
            let mut sums = vec![0.0; p];
            let mut counts = vec![0usize; p];
            for (t, v) in x.iter().enumerate() {
                sums[t % p] += v;
                counts[t % p] += 1;
            }
            (0..x.len()).map(|t| sums[t % p] / counts[t % p] as f64).collect()
        }
        None => {
            let s = ls_slope(x);
            let tm = (n - 1.0) / 2.0;
            (0..x.len()).map(|t| mean + s * (t as f64 - tm)).collect()
        }
    };
    x.iter().zip(&fitted).map(|(v, f)| (v - f).powi(2)).sum::<f64>() / total
}

pub fn series_stats(window: &[f64]) -> SeriesStats {
    let x = rescale(window);
    let slope = ls_slope(&x);
    let change = slope * x.len().saturating_sub(1) as f64;
    let trend = if change > 1e-3 {
        Trend::Increasing
    } else if change < -1e-3 {
        Trend::Decreasing
    } else {
        Trend::Flat
    };
    let acf_daily = autocorrelation(&x, DAY);
    let acf_weekly = autocorrelation(&x, WEEK);
    let periodicity = match (acf_daily, acf_weekly) {
        (Some(d), Some(w)) if w >= d && w > 0.3 => Periodicity::Weekly,
        (Some(d), _) if d > 0.3 => Periodicity::Daily,
        (None, Some(w)) if w > 0.3 => Periodicity::Weekly,
        _ => Periodicity::None,
    };
    let n = x.len().max(1) as f64;
    let mean = x.iter().sum::<f64>() / n;
    let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let cv = if mean > 0.0 { sd / mean } else { 0.0 };
    let stability = if sd == 0.0 {
        Stability::Constant
    } else if cv < 0.25 {
        Stability::Stable
    } else if cv < 0.6 {
        Stability::Moderate
    } else {
        Stability::Volatile
    };
    let period = match periodicity {
        Periodicity::Daily => Some(DAY),
        Periodicity::Weekly => Some(WEEK),
        Periodicity::None => None,
    };
    let rr = residual_ratio(&x, period);
    let noise = if sd == 0.0 || rr < 1e-12 {
        Noise::None
    } else if rr < 0.05 {
        Noise::Low
    } else if rr < 0.2 {
        Noise::Moderate
    } else {
        Noise::High
    };
    SeriesStats {
        slope,
        acf_daily,
        acf_weekly,
        cv,
        residual_ratio: rr,
        trend,
        periodicity,
        stability,
        noise,
    }
}

fn nature(indicator: &str) -> String {
    match Indicator::ALL.iter().find(|i| i.name().eq_ignore_ascii_case(indicator)) {
        Some(i) => format!("{} ({})", i.name(), i.description()),
        None => indicator.to_string(),
    }
}

/// Five-part description: nature attribute, trend, periodicity, stability, noise.
pub fn describe_series(window: &[f64], indicator: &str) -> String {
    let s = series_stats(window);
    let trend = match s.trend {
        Trend::Increasing => "increasing",
        Trend::Decreasing => "decreasing",
        Trend::Flat => "flat",
    };
    let period = match s.periodicity {
        Periodicity::Daily => "daily cycle (dominant lag 48 half-hours)",
        Periodicity::Weekly => "weekly cycle (dominant lag 336 half-hours)",
        Periodicity::None => "no clear cycle",
    };
    let stability = match s.stability {
        Stability::Constant => "constant",
        Stability::Stable => "stable",
        Stability::Moderate => "moderately variable",
        Stability::Volatile => "highly variable",
    };
    let noise = match s.noise {
        Noise::None => "none",
        Noise::Low => "low",
        Noise::Moderate => "moderate",
        Noise::High => "high",
    };
    format!(
        "Nature attribute: {}. Trend: {trend}. Periodicity: {period}. Stability: {stability}. Noise: {noise}.",
        nature(indicator)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_is_increasing() {
        let x: Vec<f64> = (0..336).map(|t| t as f64).collect();
        let d = describe_series(&x, "call");
        assert!(d.contains("Trend: increasing"), "{d}");
        let x: Vec<f64> = (0..336).map(|t| -(t as f64)).collect();
        assert_eq!(series_stats(&x).trend, Trend::Decreasing);
    }

    #[test]
    fn daily_sine_reports_daily_cycle() {
        let x: Vec<f64> = (0..336).map(|t| (2.0 * std::f64::consts::PI * t as f64 / 48.0).sin()).collect();
        let s = series_stats(&x);
        assert_eq!(s.periodicity, Periodicity::Daily);
        assert!((s.acf_daily.unwrap() - 1.0).abs() < 1e-9);
        for lag in 1..200 {
            assert!(autocorrelation(&x, lag).unwrap() <= s.acf_daily.unwrap() + 1e-12);
        }
        assert!(describe_series(&x, "tsh").contains("daily cycle"));
    }

    #[test]
    fn constant_series() {
        let s = series_stats(&[3.0; 100]);
        assert_eq!(s.stability, Stability::Constant);
        assert_eq!(s.noise, Noise::None);
        assert_eq!(s.trend, Trend::Flat);
        let d = describe_series(&[3.0; 100], "call");
        assert!(d.contains("Stability: constant") && d.contains("Noise: none"));
    }

    #[test]
    fn affine_invariant() {
        let x: Vec<f64> = (0..336).map(|t| ((t * 7919) % 101) as f64 + (t as f64 / 48.0).sin() * 20.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.5 * v + 12.0).collect();
        assert_eq!(describe_series(&x, "call"), describe_series(&y, "call"));
    }
}
