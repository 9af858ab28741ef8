//! Temporal mobility pattern view: hour-day profiles and the mobility encoder.

use std::path::Path;

use chrono::{Datelike, Duration, NaiveDateTime, Timelike};
use mvgr_tensor::layers::{Linear, Mlp, MultiHeadAttention};
use mvgr_tensor::{Block, ParamStore, Tape, Tensor, Var};

use crate::error::{io_err, Error, Result};

pub const PROFILE_LEN: usize = 24 + 7 + 168;

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityProfiles {
    pub daily: [f64; 24],
    pub weekly: [f64; 7],
    /// `[weekday][hour]`, Monday first.
    pub hour_day: [[f64; 24]; 7],
    /// Raw half-hour observations per cell.
    pub counts: [[usize; 24]; 7],
}

impl MobilityProfiles {
    /// `daily ⊕ weekly ⊕ hour_day` (row-major).
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(PROFILE_LEN);
        v.extend_from_slice(&self.daily);
        v.extend_from_slice(&self.weekly);
        for row in &self.hour_day {
            v.extend_from_slice(row);
        }
        v
    }

    /// Count-weighted mean over the matrix.
    pub fn weighted_mean(&self) -> f64 {
        let mut s = 0.0;
        let mut n = 0usize;
        for w in 0..7 {
            for h in 0..24 {
                s += self.hour_day[w][h] * self.counts[w][h] as f64;
                n += self.counts[w][h];
            }
        }
        s / n as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["weekday".to_string()];
        header.extend((0..24).map(|h| format!("h{h:02}")));
        w.write_record(&header)?;
        for (d, name) in ["mon", "tue", "wed", "thu", "fri", "sat", "sun"].iter().enumerate() {
            let mut rec = vec![name.to_string()];
            rec.extend(self.hour_day[d].iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(io_err(path))?;
        Ok(())
    }
}

/// Profiles from timestamped observations. Half-hour slots of the same clock
/// hour are averaged into an hourly value first; hourly values are then
/// bucketed by (weekday, hour) with weights equal to their slot counts, so
/// every cell is the mean of the raw observations that fall into it.
pub fn aggregate_observations(obs: &[(NaiveDateTime, f64)]) -> Result<MobilityProfiles> {
    if obs.is_empty() {
        return Err(Error::Invalid("region has no observations".into()));
    }
    let mut hours: std::collections::BTreeMap<(i32, u32, u32), (f64, usize)> = Default::default();
    for &(ts, v) in obs {
        if !v.is_finite() {
            return Err(Error::Invalid(format!("non-finite observation at {ts}")));
        }
        let e = hours.entry((ts.year(), ts.ordinal(), ts.hour())).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    let mut sum = [[0.0; 24]; 7];
    let mut counts = [[0usize; 24]; 7];
    for (&(y, ord, h), &(s, n)) in &hours {
        let date = chrono::NaiveDate::from_yo_opt(y, ord).expect("valid ordinal");
        let w = date.weekday().num_days_from_monday() as usize;
        let hourly = s / n as f64;
        sum[w][h as usize] += hourly * n as f64;
        counts[w][h as usize] += n;
    }
    let mut hour_day = [[0.0; 24]; 7];
    for w in 0..7 {
        for h in 0..24 {
            if counts[w][h] > 0 {
                hour_day[w][h] = sum[w][h] / counts[w][h] as f64;
            }
        }
    }
    let mut daily = [0.0; 24];
    for h in 0..24 {
        let n: usize = (0..7).map(|w| counts[w][h]).sum();
        if n > 0 {
            daily[h] = (0..7).map(|w| hour_day[w][h] * counts[w][h] as f64).sum::<f64>() / n as f64;
        }
    }
    let mut weekly = [0.0; 7];
    for w in 0..7 {
        let n: usize = counts[w].iter().sum();
        if n > 0 {
            weekly[w] = (0..24).map(|h| hour_day[w][h] * counts[w][h] as f64).sum::<f64>() / n as f64;
        }
    }
    Ok(MobilityProfiles {
        daily,
        weekly,
        hour_day,
        counts,
    })
}

/// Profiles of `series[range]`, where `series[0]` is at `start`.
pub fn aggregate_profiles(series: &[f64], start: NaiveDateTime, range: std::ops::Range<usize>) -> Result<MobilityProfiles> {
    if range.end > series.len() {
        return Err(Error::Invalid(format!("profile range {range:?} exceeds series of {}", series.len())));
    }
    let obs: Vec<(NaiveDateTime, f64)> = range
        .map(|t| (start + Duration::minutes(30 * t as i64), series[t]))
        .collect();
    aggregate_observations(&obs)
}

/// Stacks flattened profiles, z-scored per region (zero spread maps to zeros).
pub fn profile_matrix(profiles: &[MobilityProfiles]) -> Tensor {
    let mut data = Vec::with_capacity(profiles.len() * PROFILE_LEN);
    for p in profiles {
        let v = p.flatten();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        data.extend(v.iter().map(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 }));
    }
    Tensor::matrix(profiles.len(), PROFILE_LEN, data)
}

/// MLP over the flattened profile, reshaped to 7 weekday tokens of 24 values,
/// projected to `d`, self-attention across the 7 tokens, then a token mean.
#[derive(Debug, Clone, Copy)]
pub struct MobilityEncoder {
    pub mlp: Mlp,
    pub token_proj: Linear,
    pub attention: MultiHeadAttention,
    pub dim: usize,
}

impl MobilityEncoder {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, dim: usize, heads: usize) -> Self {
        Self {
            mlp: Mlp::new(store, &format!("{name}.mlp"), PROFILE_LEN, hidden, 168),
            token_proj: Linear::new(store, &format!("{name}.token_proj"), 24, dim, true),
            attention: MultiHeadAttention::new(store, &format!("{name}.mha"), dim, heads),
            dim,
        }
    }

    /// `profiles` is `N × 199`; returns `N × d`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, profiles: Var) -> Result<Var> {
        let (n, c) = tape.shape(profiles);
        if c != PROFILE_LEN {
            return Err(Error::Shape(format!("mobility profiles have {c} columns, expected {PROFILE_LEN}")));
        }
        let h = self.mlp.forward(tape, store, profiles);
        let tokens = tape.reshape(h, 7 * n, 24);
        let tokens = self.token_proj.forward(tape, store, tokens);
        let att = self.attention.forward(tape, store, tokens, tokens, tokens, &Block::uniform(n, 7))?;
        Ok(tape.block_mean_rows(att, 7))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn monday() -> NaiveDateTime {
        NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap()
    }

    #[test]
    fn constant_series() {
        let p = aggregate_profiles(&vec![4.0; 336 * 2], monday(), 0..672).unwrap();
        assert!(p.flatten().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn hour_index_series() {
        let s: Vec<f64> = (0..336).map(|t| ((t / 2) % 24) as f64).collect();
        let p = aggregate_profiles(&s, monday(), 0..336).unwrap();
        for h in 0..24 {
            assert_eq!(p.daily[h], h as f64);
        }
        assert!(p.weekly.iter().all(|&w| w == 11.5));
    }

    #[test]
    fn weighted_mean_matches_raw_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..50.0)).collect();
        // Start mid-hour so edge hours are incomplete.
        let start = monday() + Duration::minutes(30);
        let p = aggregate_profiles(&s, start, 0..s.len()).unwrap();
        let raw = s.iter().sum::<f64>() / s.len() as f64;
        assert!((p.weighted_mean() - raw).abs() < 1e-9);
    }

    #[test]
    fn observation_order_irrelevant_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut obs: Vec<(NaiveDateTime, f64)> = (0..400)
            .map(|t| (monday() + Duration::minutes(30 * t), rng.gen_range(0.0..10.0)))
            .collect();
        let a = aggregate_observations(&obs).unwrap();
        obs.shuffle(&mut rng);
        let b = aggregate_observations(&obs).unwrap();
        for (x, y) in a.flatten().iter().zip(b.flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
        let scaled: Vec<_> = obs.iter().map(|&(t, v)| (t, 2.5 * v)).collect();
        let c = aggregate_observations(&scaled).unwrap();
        for (x, y) in b.flatten().iter().zip(c.flatten()) {
            assert!((2.5 * x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_region_rejected() {
        assert!(aggregate_observations(&[]).is_err());
    }

    #[test]
    fn encoder_shape_and_identical_rows() {
        let mut store = ParamStore::new(1);
        let enc = MobilityEncoder::new(&mut store, "mob", 32, 8, 2);
        let s: Vec<f64> = (0..672).map(|t| ((t % 48) as f64).sin() + 2.0).collect();
        let p = aggregate_profiles(&s, monday(), 0..672).unwrap();
        let m = profile_matrix(&[p.clone(), p]);
        let mut tape = Tape::new();
        let x = tape.constant(&m);
        let z = enc.forward(&mut tape, &store, x).unwrap();
        let v = tape.value(z);
        assert_eq!((v.rows(), v.cols()), (2, 8));
        assert_eq!(v.row_slice(0), v.row_slice(1));
    }
}
