//! Key-value prompt memory pool queried by county embeddings.

use mvgr_tensor::{Init, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct PromptPool {
    pub keys: ParamId,
    pub values: ParamId,
    pub size: usize,
    pub k_p: usize,
}

pub struct PromptOutput {
    /// `n × d_v` retrieved prompts.
    pub prompts: Var,
    /// `n × M` retrieval weights, zero outside the selected keys.
    pub weights: Var,
}

/// Indices of the `k` largest similarities; ties go to the lower index.
pub fn top_k_indices(sims: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl PromptPool {
    pub fn new(store: &mut ParamStore, name: &str, size: usize, key_dim: usize, value_dim: usize, k_p: usize) -> Result<Self> {
        if k_p == 0 || k_p > size {
            return Err(Error::Config(format!("k_p = {k_p} must lie in 1..={size}")));
        }
        Ok(Self {
            keys: store.add(&format!("{name}.keys"), size, key_dim, Init::Uniform(1.0)),
            values: store.add(&format!("{name}.values"), size, value_dim, Init::Uniform(0.1)),
            size,
            k_p,
        })
    }

    /// `P_r = Σ_j α_j v_j` over the `k_p` keys most cosine-similar to each row of
    /// `queries`, with `α` the softmax of those similarities.
    pub fn retrieve(&self, tape: &mut Tape, store: &ParamStore, queries: Var) -> Result<PromptOutput> {
        let (n, d) = tape.shape(queries);
        if d != store.get(self.keys).cols() {
            return Err(Error::Shape(format!("query width {d} differs from key width {}", store.get(self.keys).cols())));
        }
        for r in 0..n {
            if tape.value(queries).row_slice(r).iter().all(|&v| v == 0.0) {
                return Err(Error::Invalid(format!("prompt query row {r} has zero norm")));
            }
        }
        let keys = tape.param(store, self.keys);
        if store.get(self.keys).data().chunks(d).any(|k| k.iter().all(|&v| v == 0.0)) {
            return Err(Error::Invalid("prompt pool has a zero-norm key".into()));
        }
        let qn = tape.l2_normalize_rows(queries);
        let kn = tape.l2_normalize_rows(keys);
        let kt = tape.transpose(kn);
        let sims = tape.matmul(qn, kt);
        let mut mask = Tensor::full(n, self.size, f64::NEG_INFINITY);
        for r in 0..n {
            for j in top_k_indices(tape.value(sims).row_slice(r), self.k_p) {
                mask.set(r, j, 0.0);
            }
        }
        let mask = tape.constant(&mask);
        let masked = tape.add(sims, mask);
        let weights = tape.softmax_rows(masked);
        let values = tape.param(store, self.values);
        let prompts = tape.matmul(weights, values);
        Ok(PromptOutput { prompts, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tie_rule() {
        assert_eq!(top_k_indices(&[0.5, 0.9, 0.9, 0.1], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.2, 0.2, 0.2], 1), vec![0]);
    }

    #[test]
    fn singleton_and_uniform() {
        let mut store = ParamStore::new(0);
        let pool = PromptPool::new(&mut store, "mp", 3, 3, 2, 1).unwrap();
        store.set(pool.keys, Tensor::identity(3)).unwrap();
        let vals = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        store.set(pool.values, vals.clone()).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::row(&[0.0, 2.0, 0.0]));
        let out = pool.retrieve(&mut tape, &store, q).unwrap();
        assert_eq!(tape.value(out.prompts).data(), &[3.0, 4.0]);

        let wide = PromptPool { k_p: 2, ..pool };
        store.set(pool.keys, Tensor::full(3, 3, 1.0)).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::row(&[0.3, -1.0, 2.0]));
        let out = wide.retrieve(&mut tape, &store, q).unwrap();
        let p = tape.value(out.prompts);
        assert!((p.get(0, 0) - 2.0).abs() < 1e-12 && (p.get(0, 1) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_zero_query_and_bad_width() {
        let mut store = ParamStore::new(0);
        assert!(PromptPool::new(&mut store, "x", 4, 2, 2, 5).is_err());
        let pool = PromptPool::new(&mut store, "mp", 4, 2, 2, 2).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(&Tensor::zeros(1, 2));
        assert!(pool.retrieve(&mut tape, &store, q).is_err());
    }
}
