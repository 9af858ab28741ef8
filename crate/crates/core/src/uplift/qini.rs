use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Qini curve at every prefix of the ranking, `curve[k]` after `k` samples.
///
/// Samples are ranked by descending score with a stable sort, so ties keep
/// their input order. The curve value is the treated conversions so far minus
/// the control conversions so far, the latter rescaled by the treated/control
/// count ratio of the prefix.
pub fn qini_curve(scores: &[f64], outcomes: &[bool], treatments: &[usize], control: usize) -> Result<Vec<f64>> {
    let n = scores.len();
    if outcomes.len() != n || treatments.len() != n {
        return Err(Error::Shape(format!(
            "{n} scores, {} outcomes and {} treatments",
            outcomes.len(),
            treatments.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN uplift score".into()));
    }
    let n_control = treatments.iter().filter(|&&t| t == control).count();
    if n_control == 0 || n_control == n {
        return Err(Error::Invalid("qini needs both treated and control samples".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut curve = Vec::with_capacity(n + 1);
    curve.push(0.0);
    let (mut nt, mut nc, mut rt, mut rc) = (0usize, 0usize, 0usize, 0usize);
    for i in order {
        let y = usize::from(outcomes[i]);
        if treatments[i] == control {
            nc += 1;
            rc += y;
        } else {
            nt += 1;
            rt += y;
        }
        let scaled = if nc == 0 { 0.0 } else { rc as f64 * nt as f64 / nc as f64 };
        curve.push(rt as f64 - scaled);
    }
    Ok(curve)
}

/// Area between the Qini curve and the straight line from the origin to its
/// end point, over the targeted fraction in `[0, 1]`, divided by the sample
/// count. Every treatment other than `control` counts as treated.
pub fn qini(scores: &[f64], outcomes: &[bool], treatments: &[usize], control: usize) -> Result<f64> {
    let curve = qini_curve(scores, outcomes, treatments, control)?;
    let n = scores.len() as f64;
    let end = curve[curve.len() - 1];
    let area: f64 = curve[1..].iter().enumerate().map(|(k, q)| q - end * (k + 1) as f64 / n).sum::<f64>() / n;
    Ok(area / n)
}

/// Coefficients of `permutations` seeded shuffles of `scores` against the
/// same outcomes: the null distribution of an uninformative ranking.
pub fn qini_permutation_null(
    scores: &[f64],
    outcomes: &[bool],
    treatments: &[usize],
    control: usize,
    permutations: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mvgr_tensor::derive_seed(seed, "qini.permutations"));
    let mut shuffled = scores.to_vec();
    (0..permutations)
        .map(|_| {
            shuffled.shuffle(&mut rng);
            qini(&shuffled, outcomes, treatments, control)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_outcomes_give_zero() {
        let q = qini(&[0.3, 0.1, 0.9, 0.5], &[false; 4], &[1, 0, 1, 0], 0).unwrap();
        assert_eq!(q, 0.0);
    }

    #[test]
    fn needs_both_arms() {
        assert!(qini(&[0.1, 0.2], &[true, false], &[1, 1], 0).is_err());
        assert!(qini(&[0.1, 0.2], &[true, false], &[0, 0], 0).is_err());
        assert!(qini(&[0.1], &[true, false], &[0, 1], 0).is_err());
    }

    #[test]
    fn hand_computed_curve() {
        // Ranked: t1 (conv), c (conv), t2, c.
        let curve = qini_curve(&[4.0, 3.0, 2.0, 1.0], &[true, true, false, false], &[1, 0, 2, 0], 0).unwrap();
        assert_eq!(curve, vec![0.0, 1.0, 0.0, -1.0, 0.0]);
    }
}
