//! WMAPE, MAE and the effective evaluation window.

use chrono::{NaiveDateTime, Timelike};

use crate::error::{Error, Result};

/// First and last half-hour slot of the evaluation window (06:00 and 22:30).
pub const WINDOW_FIRST_SLOT: usize = 12;
pub const WINDOW_LAST_SLOT: usize = 45;
pub const SLOTS_PER_DAY_IN_WINDOW: usize = WINDOW_LAST_SLOT - WINDOW_FIRST_SLOT + 1;

pub fn is_effective(ts: NaiveDateTime) -> bool {
    let slot = (ts.hour() * 2 + ts.minute() / 30) as usize;
    (WINDOW_FIRST_SLOT..=WINDOW_LAST_SLOT).contains(&slot)
}

/// Mask over steps `range` of a half-hour series starting at `start`.
pub fn effective_mask(start: NaiveDateTime, range: std::ops::Range<usize>) -> Vec<bool> {
    range
        .map(|t| is_effective(start + chrono::Duration::minutes(30 * t as i64)))
        .collect()
}

fn check(y: &[f64], yhat: &[f64], mask: Option<&[bool]>) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::Shape(format!("{} actuals vs {} predictions", y.len(), yhat.len())));
    }
    if let Some(m) = mask {
        if m.len() != y.len() {
            return Err(Error::Shape(format!("mask of {} for {} values", m.len(), y.len())));
        }
    }
    Ok(())
}

fn selected<'a>(y: &'a [f64], yhat: &'a [f64], mask: Option<&'a [bool]>) -> impl Iterator<Item = (f64, f64)> + 'a {
    y.iter()
        .zip(yhat)
        .enumerate()
        .filter(move |(i, _)| mask.is_none_or(|m| m[*i]))
        .map(|(_, (&a, &b))| (a, b))
}

/// `Σ|y − ŷ| / Σ|y|` over the masked entries.
pub fn wmape(y: &[f64], yhat: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check(y, yhat, mask)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in selected(y, yhat, mask) {
        num += (a - b).abs();
        den += a.abs();
    }
    if den == 0.0 {
        return Err(Error::Invalid("WMAPE undefined: all actuals under the mask are zero".into()));
    }
    Ok(num / den)
}

pub fn mae(y: &[f64], yhat: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check(y, yhat, mask)?;
    let (mut num, mut n) = (0.0, 0usize);
    for (a, b) in selected(y, yhat, mask) {
        num += (a - b).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::Invalid("MAE undefined: empty mask".into()));
    }
    Ok(num / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    #[test]
    fn hand_values() {
        assert_eq!(wmape(&[1.0, 1.0], &[0.0, 2.0], None).unwrap(), 1.0);
        assert_eq!(mae(&[1.0, 3.0], &[2.0, 5.0], None).unwrap(), 1.5);
        assert_eq!(wmape(&[2.0, 3.0], &[2.0, 3.0], None).unwrap(), 0.0);
        assert!(wmape(&[0.0, 1.0], &[1.0, 1.0], Some(&[true, false])).is_err());
        assert!(mae(&[1.0], &[1.0], Some(&[false])).is_err());
        assert!(wmape(&[1.0], &[1.0, 2.0], None).is_err());
    }

    #[test]
    fn mask_has_34_slots_per_day() {
        let start = NaiveDate::from_ymd_opt(2024, 3, 4).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let m = effective_mask(start, 0..48 * 3);
        assert_eq!(m.iter().filter(|&&b| b).count(), 34 * 3);
        assert!(!m[11] && m[12] && m[45] && !m[46]);
    }
}
