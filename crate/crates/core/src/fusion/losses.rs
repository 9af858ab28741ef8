//! InfoNCE with cosine similarity, in batched (tape) and scalar (plain) form.

use mvgr_tensor::{Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b))
}

/// `−log[exp(s(a,p)/τ) / (exp(s(a,p)/τ) + Σ_j exp(s(a,n_j)/τ))]` on plain vectors.
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    for v in std::iter::once(anchor).chain(std::iter::once(positive)).chain(negatives.iter().map(Vec::as_slice)) {
        if norm(v) == 0.0 {
            return Err(Error::Invalid("InfoNCE needs nonzero vectors".into()));
        }
    }
    let pos = cosine(anchor, positive) / tau;
    let logits: Vec<f64> = std::iter::once(pos).chain(negatives.iter().map(|n| cosine(anchor, n) / tau)).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// Triples for a batch: anchor row `anchors[i]`, positive row `positives[i]`,
/// negative rows `negatives[i]` (all indices into the respective matrices).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NceBatch {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<Vec<usize>>,
}

impl NceBatch {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn check_rows_nonzero(t: &Tensor, rows: impl Iterator<Item = usize>, what: &str) -> Result<()> {
    for r in rows {
        if norm(t.row_slice(r)) == 0.0 {
            return Err(Error::Invalid(format!("{what} row {r} has zero norm")));
        }
    }
    Ok(())
}

/// Mean InfoNCE over a batch, recorded on the tape. Anchors come from `a`,
/// positives and negatives from `b` (which may be the same node).
pub fn info_nce_batch(tape: &mut Tape, a: Var, b: Var, batch: &NceBatch, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Invalid("temperature must be positive".into()));
    }
    if batch.is_empty() {
        return Err(Error::Invalid("empty InfoNCE batch".into()));
    }
    let n_l = batch.negatives[0].len();
    if n_l == 0 || batch.negatives.iter().any(|n| n.len() != n_l) || batch.positives.len() != batch.len() {
        return Err(Error::Shape("every anchor needs one positive and the same number of negatives".into()));
    }
    check_rows_nonzero(tape.value(a), batch.anchors.iter().copied(), "anchor")?;
    check_rows_nonzero(
        tape.value(b),
        batch.positives.iter().chain(batch.negatives.iter().flatten()).copied(),
        "positive/negative",
    )?;
    let bsz = batch.len();
    let an = tape.l2_normalize_rows(a);
    let bn = if a == b { an } else { tape.l2_normalize_rows(b) };
    let anc = tape.gather_rows(an, &batch.anchors);
    let pos = tape.gather_rows(bn, &batch.positives);
    let pp = tape.mul(anc, pos);
    let pos_sim = tape.row_sums(pp);
    let rep: Vec<usize> = batch.anchors.iter().flat_map(|&i| std::iter::repeat_n(i, n_l)).collect();
    let anc_rep = tape.gather_rows(an, &rep);
    let neg_idx: Vec<usize> = batch.negatives.iter().flatten().copied().collect();
    let negs = tape.gather_rows(bn, &neg_idx);
    let nn = tape.mul(anc_rep, negs);
    let neg_sim = tape.row_sums(nn);
    let neg_sim = tape.reshape(neg_sim, bsz, n_l);
    let logits = tape.concat_cols(&[pos_sim, neg_sim]);
    let logits = tape.scale(logits, 1.0 / tau);
    let ls = tape.log_softmax_rows(logits);
    let first = tape.slice_cols(ls, 0, 1);
    let s = tape.sum(first);
    Ok(tape.scale(s, -1.0 / bsz as f64))
}

/// Same-row positives with `n_l` negatives drawn without replacement from the
/// other rows of `batch`.
pub fn same_row_batch<R: Rng>(batch: &[usize], n_l: usize, rng: &mut R) -> Result<NceBatch> {
    if batch.len() < n_l + 1 {
        return Err(Error::Invalid(format!(
            "batch of {} regions cannot supply {n_l} negatives per anchor",
            batch.len()
        )));
    }
    let mut negatives = Vec::with_capacity(batch.len());
    for (pos, _) in batch.iter().enumerate() {
        let picks = sample(rng, batch.len() - 1, n_l);
        negatives.push(
            picks
                .into_iter()
                .map(|k| batch[if k >= pos { k + 1 } else { k }])
                .collect(),
        );
    }
    Ok(NceBatch {
        anchors: batch.to_vec(),
        positives: batch.to_vec(),
        negatives,
    })
}

/// County/grid pairs: anchor county `i`, positive member grid `j`, and `n_l`
/// negatives drawn without replacement from grids of other counties.
pub fn holistic_batch<R: Rng>(members: &[Vec<usize>], n_grids: usize, n_l: usize, rng: &mut R) -> Result<NceBatch> {
    if members.len() < 2 {
        return Err(Error::Invalid("holistic-part loss needs at least two counties".into()));
    }
    let mut owner = vec![usize::MAX; n_grids];
    for (c, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::Invalid(format!("county {c} has no grids")));
        }
        for &g in m {
            owner[g] = c;
        }
    }
    let mut batch = NceBatch {
        anchors: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for (c, m) in members.iter().enumerate() {
        let others: Vec<usize> = (0..n_grids).filter(|&g| owner[g] != c && owner[g] != usize::MAX).collect();
        if others.len() < n_l {
            return Err(Error::Invalid(format!(
                "county {c} has only {} foreign grids for {n_l} negatives",
                others.len()
            )));
        }
        for &j in m {
            batch.anchors.push(c);
            batch.positives.push(j);
            batch.negatives.push(sample(rng, others.len(), n_l).into_iter().map(|k| others[k]).collect());
        }
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn closed_forms() {
        let l = info_nce(&[1.0, 0.0], &[2.0, 0.0], &[vec![0.0, 1.0]], 1.0).unwrap();
        assert!((l - (-(1f64.exp() / (1f64.exp() + 1.0)).ln())).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
        let l = info_nce(&[1.0, 0.0], &[1.0, 0.0], &[vec![-1.0, 0.0], vec![-3.0, 0.0]], 1.0).unwrap();
        assert!((l - 0.2395).abs() < 1e-4);
    }

    #[test]
    fn zero_vector_rejected() {
        assert!(info_nce(&[0.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]], 1.0).is_err());
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let b = NceBatch {
            anchors: vec![0],
            positives: vec![1],
            negatives: vec![vec![1]],
        };
        assert!(info_nce_batch(&mut tape, a, a, &b, 1.0).is_err());
    }

    #[test]
    fn samplers_respect_constraints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = same_row_batch(&[3, 5, 7, 9], 3, &mut rng).unwrap();
        for (i, n) in b.anchors.iter().zip(&b.negatives) {
            assert!(!n.contains(i));
            let mut s = n.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 3);
        }
        assert!(same_row_batch(&[1, 2], 2, &mut rng).is_err());
        let members = vec![vec![0, 1], vec![2], vec![3, 4]];
        let h = holistic_batch(&members, 5, 2, &mut rng).unwrap();
        assert_eq!(h.len(), 5);
        for ((c, _), n) in h.anchors.iter().zip(&h.positives).zip(&h.negatives) {
            assert!(n.iter().all(|g| !members[*c].contains(g)));
        }
        assert!(holistic_batch(&members[..1], 5, 1, &mut rng).is_err());
    }
}
