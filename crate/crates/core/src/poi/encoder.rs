//! Category encoders and the spatial-proximity / hierarchical-category losses.

use mvgr_tensor::layers::Mlp;
use mvgr_tensor::{Init, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::synth::CategoryVocab;

/// Embedding table followed by an MLP. Since inputs are one-hot, encoding
/// category `l` is `MLP(table[l])`; all categories at once give the `e_l` rows.
#[derive(Debug, Clone, Copy)]
pub struct CategoryEncoder {
    pub table: ParamId,
    pub mlp: Mlp,
    pub n_categories: usize,
    pub dim: usize,
}

impl CategoryEncoder {
    pub fn new(store: &mut ParamStore, name: &str, n_categories: usize, dim: usize) -> Self {
        Self {
            table: store.add(&format!("{name}.table"), n_categories, dim, Init::Uniform(0.5)),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, dim, dim),
            n_categories,
            dim,
        }
    }

    /// `n_categories × dim` matrix of encoded categories.
    pub fn encode_all(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let t = tape.param(store, self.table);
        self.mlp.forward(tape, store, t)
    }

    /// Encodes arbitrary one-hot rows.
    pub fn encode_onehot(&self, tape: &mut Tape, store: &ParamStore, onehot: Var) -> Var {
        let t = tape.param(store, self.table);
        let e = tape.matmul(onehot, t);
        self.mlp.forward(tape, store, e)
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        for id in [self.table, self.mlp.l1.w, self.mlp.l2.w] {
            store.set_trainable(id, false);
        }
        for id in [self.mlp.l1.b, self.mlp.l2.b].into_iter().flatten() {
            store.set_trainable(id, false);
        }
    }
}

/// `−Σ counts[a][b] · log softmax_l(e_lᵀ e_a)[b]`: the summed skip-gram
/// cross-entropy for (center category `a`, context category `b`) pairs.
pub fn cooccurrence_loss(tape: &mut Tape, e: Var, counts: &Tensor) -> Var {
    let et = tape.transpose(e);
    let logits = tape.matmul(e, et);
    let ls = tape.log_softmax_rows(logits);
    let c = tape.constant(counts);
    let p = tape.mul(ls, c);
    let s = tape.sum(p);
    tape.scale(s, -1.0)
}

fn check_cat(c: usize, n: usize) -> Result<()> {
    if c >= n {
        return Err(Error::Invalid(format!("category {c} outside encoder vocabulary of {n}")));
    }
    Ok(())
}

/// Pair counts for a spatial-proximity batch. `cats[p]` is the category of POI `p`.
pub fn proximity_counts(cats: &[usize], n_categories: usize, centers: &[usize], neighbors: &[Vec<usize>]) -> Result<Tensor> {
    if centers.len() != neighbors.len() {
        return Err(Error::Shape("one neighbor set per center required".into()));
    }
    let mut counts = Tensor::zeros(n_categories, n_categories);
    for (&i, nb) in centers.iter().zip(neighbors) {
        if nb.is_empty() {
            return Err(Error::Invalid(format!("poi {i} has an empty neighbor set")));
        }
        let a = cats[i];
        check_cat(a, n_categories)?;
        for &j in nb {
            let b = cats[j];
            check_cat(b, n_categories)?;
            counts.set(a, b, counts.get(a, b) + 1.0);
        }
    }
    Ok(counts)
}

/// Spatial-proximity loss summed over every (center, neighbor) pair.
pub fn spatial_proximity_loss(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &CategoryEncoder,
    cats: &[usize],
    centers: &[usize],
    neighbors: &[Vec<usize>],
) -> Result<Var> {
    let counts = proximity_counts(cats, encoder.n_categories, centers, neighbors)?;
    let e = encoder.encode_all(tape, store);
    Ok(cooccurrence_loss(tape, e, &counts))
}

/// Skip-gram counts and per-target multiplicities for a batch of walks.
/// Sequences shorter than two nodes contribute nothing.
pub fn walk_counts(cats: &[usize], n_categories: usize, sequences: &[Vec<usize>]) -> Result<(Tensor, Vec<f64>)> {
    let mut counts = Tensor::zeros(n_categories, n_categories);
    let mut targets = vec![0.0; n_categories];
    for seq in sequences {
        let Some((&t, ctx)) = seq.split_first() else { continue };
        if ctx.is_empty() {
            continue;
        }
        let a = cats[t];
        check_cat(a, n_categories)?;
        targets[a] += 1.0;
        for &j in ctx {
            let b = cats[j];
            check_cat(b, n_categories)?;
            counts.set(a, b, counts.get(a, b) + 1.0);
        }
    }
    Ok((counts, targets))
}

/// `λ Σ_i Σ_l w_il ‖e_{c(i)} − e_l‖²` with `w_il = 1` when category `l`
/// shares the primary group of target `i`.
pub fn group_regularizer(tape: &mut Tape, e: Var, vocab: &CategoryVocab, targets: &[f64], lambda: f64) -> Var {
    let mut ia = Vec::new();
    let mut il = Vec::new();
    let mut w = Vec::new();
    for (a, &n) in targets.iter().enumerate() {
        if n == 0.0 {
            continue;
        }
        for l in vocab.secondaries_of(vocab.primary_of(a)) {
            ia.push(a);
            il.push(l);
            w.push(n);
        }
    }
    if ia.is_empty() {
        let z = tape.constant(&Tensor::scalar(0.0));
        return z;
    }
    let za = tape.gather_rows(e, &ia);
    let zl = tape.gather_rows(e, &il);
    let diff = tape.sub(za, zl);
    let sq = tape.square(diff);
    let rs = tape.row_sums(sq);
    let n = w.len();
    let wv = tape.constant(&Tensor::matrix(n, 1, w));
    let weighted = tape.mul(rs, wv);
    let s = tape.sum(weighted);
    tape.scale(s, lambda)
}

/// Hierarchical-category loss over random-walk sequences; the first node of
/// each sequence is the target and the rest its context.
pub fn hierarchical_loss(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &CategoryEncoder,
    vocab: &CategoryVocab,
    cats: &[usize],
    sequences: &[Vec<usize>],
    lambda: f64,
) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid("lambda must be nonnegative".into()));
    }
    if encoder.n_categories != vocab.n_secondary() {
        return Err(Error::Shape("hierarchical encoder must cover the secondary vocabulary".into()));
    }
    let (counts, targets) = walk_counts(cats, encoder.n_categories, sequences)?;
    let e = encoder.encode_all(tape, store);
    let sg = cooccurrence_loss(tape, e, &counts);
    let reg = group_regularizer(tape, e, vocab, &targets, lambda);
    Ok(tape.add(sg, reg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_softmax_at(e: &Tensor, a: usize, b: usize) -> f64 {
        let n = e.rows();
        let dot = |x: usize, y: usize| (0..e.cols()).map(|k| e.get(x, k) * e.get(y, k)).sum::<f64>();
        let denom: f64 = (0..n).map(|l| dot(l, a).exp()).sum();
        dot(b, a) - denom.ln()
    }

    #[test]
    fn symmetric_logits_give_ln2() {
        let mut store = ParamStore::new(0);
        let enc = CategoryEncoder::new(&mut store, "fs", 2, 4);
        for id in [enc.table, enc.mlp.l1.w, enc.mlp.l2.w] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape[0], shape[1])).unwrap();
        }
        let mut tape = Tape::new();
        let cats = [0, 1, 0];
        let loss = spatial_proximity_loss(&mut tape, &store, &enc, &cats, &[0], &[vec![1]]).unwrap();
        assert!((tape.scalar(loss) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn proximity_matches_pair_loop() {
        let mut store = ParamStore::new(3);
        let enc = CategoryEncoder::new(&mut store, "fs", 5, 6);
        let cats = [0, 3, 4, 1, 1, 2, 0, 4];
        let centers = [0, 2, 5, 7];
        let nbrs = vec![vec![1, 2], vec![3, 4, 0], vec![6], vec![0, 1, 2, 3]];
        let mut tape = Tape::new();
        let loss = spatial_proximity_loss(&mut tape, &store, &enc, &cats, &centers, &nbrs).unwrap();
        let mut t2 = Tape::new();
        let ev = enc.encode_all(&mut t2, &store);
        let e = t2.value(ev).clone();
        let mut naive = 0.0;
        for (&i, nb) in centers.iter().zip(&nbrs) {
            for &j in nb {
                naive -= log_softmax_at(&e, cats[i], cats[j]);
            }
        }
        assert!((tape.scalar(loss) - naive).abs() < 1e-6);
    }

    #[test]
    fn empty_neighbor_set_rejected() {
        let mut store = ParamStore::new(0);
        let enc = CategoryEncoder::new(&mut store, "fs", 2, 2);
        let mut tape = Tape::new();
        assert!(spatial_proximity_loss(&mut tape, &store, &enc, &[0, 1], &[0], &[vec![]]).is_err());
    }

    #[test]
    fn zero_lambda_is_pure_skipgram() {
        let vocab = CategoryVocab::generate(2, 4).unwrap();
        let mut store = ParamStore::new(1);
        let enc = CategoryEncoder::new(&mut store, "fh", 4, 3);
        let cats = [0, 1, 2, 3, 1];
        let seqs = vec![vec![0, 1, 2], vec![3, 4, 0]];
        let mut tape = Tape::new();
        let full = hierarchical_loss(&mut tape, &store, &enc, &vocab, &cats, &seqs, 0.0).unwrap();
        let (counts, _) = walk_counts(&cats, 4, &seqs).unwrap();
        let e = enc.encode_all(&mut tape, &store);
        let sg = cooccurrence_loss(&mut tape, e, &counts);
        assert_eq!(tape.scalar(full), tape.scalar(sg));
    }

    #[test]
    fn regularizer_vanishes_on_collapsed_groups() {
        // One primary group; all encoded rows equal.
        let vocab = CategoryVocab::generate(1, 3).unwrap();
        let mut tape = Tape::new();
        let e = tape.constant(&Tensor::from_rows(&[vec![0.3, -0.2], vec![0.3, -0.2], vec![0.3, -0.2]]).unwrap());
        let r = group_regularizer(&mut tape, e, &vocab, &[2.0, 1.0, 0.0], 5.0);
        assert_eq!(tape.scalar(r), 0.0);
    }
}
