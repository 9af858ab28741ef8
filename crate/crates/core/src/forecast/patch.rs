//! Patch encoding of one channel with an appended learned [EOS] token.

use mvgr_tensor::layers::{Linear, Mlp, MultiHeadAttention};
use mvgr_tensor::{Block, Init, ParamId, ParamStore, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub patch: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self {
            lookback: 336,
            horizon: 48,
            patch: 48,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.lookback == 0 || !self.lookback.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "lookback {} is not a positive multiple of patch length {}",
                self.lookback, self.patch
            )));
        }
        if self.horizon == 0 || self.horizon > self.lookback {
            return Err(Error::Config(format!("horizon {} must lie in 1..={}", self.horizon, self.lookback)));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.lookback / self.patch
    }
}

/// `π_N(MLP(MSA(x + p)))` with residual connections around both sublayers;
/// `π_N` picks the [EOS] row.
#[derive(Debug, Clone, Copy)]
pub struct PatchEncoder {
    pub embed: Linear,
    pub pos: ParamId,
    pub eos: ParamId,
    pub attention: MultiHeadAttention,
    pub mlp: Mlp,
    pub patch: usize,
    pub n_patches: usize,
    pub dim: usize,
}

pub struct PatchOutput {
    /// `n × D`, one row per window.
    pub summary: Var,
    /// `(n · n_patches) × D` patch embeddings with positions, before attention.
    pub patch_tokens: Var,
    pub attention: Var,
}

impl PatchEncoder {
    pub fn new(store: &mut ParamStore, name: &str, spec: &PatchSpec, dim: usize, heads: usize, hidden: usize) -> Self {
        let n_patches = spec.n_patches();
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), spec.patch, dim, true),
            pos: store.add(&format!("{name}.pos"), n_patches + 1, dim, Init::Uniform(0.1)),
            eos: store.add(&format!("{name}.eos"), 1, dim, Init::Uniform(0.5)),
            attention: MultiHeadAttention::new(store, &format!("{name}.mha"), dim, heads),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, dim),
            patch: spec.patch,
            n_patches,
            dim,
        }
    }

    /// Encodes `windows` (`n × L`) independently per row.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, windows: Var) -> Result<PatchOutput> {
        let (n, len) = tape.shape(windows);
        if len != self.patch * self.n_patches {
            return Err(Error::Shape(format!(
                "window length {len} is not {} patches of {}",
                self.n_patches, self.patch
            )));
        }
        let seq = self.n_patches + 1;
        let patches = tape.reshape(windows, n * self.n_patches, self.patch);
        let emb = self.embed.forward(tape, store, patches);
        let eos = tape.param(store, self.eos);
        let eos = crate::nn::repeat_row(tape, eos, n);
        let stacked = tape.concat_rows(&[emb, eos]);
        let order: Vec<usize> = (0..n)
            .flat_map(|i| (0..self.n_patches).map(move |p| i * self.n_patches + p).chain(std::iter::once(n * self.n_patches + i)))
            .collect();
        let tokens = tape.gather_rows(stacked, &order);
        let pos = tape.param(store, self.pos);
        let pos_idx: Vec<usize> = (0..n).flat_map(|_| 0..seq).collect();
        let pos = tape.gather_rows(pos, &pos_idx);
        let x = tape.add(tokens, pos);
        let p = self.attention.vars(tape, store);
        let (a, att) = mvgr_tensor::layers::multi_head_attention_with_weights(
            tape,
            x,
            x,
            x,
            self.attention.heads,
            p,
            &Block::uniform(n, seq),
        )?;
        let h = tape.add(x, a);
        let m = self.mlp.forward(tape, store, h);
        let out = tape.add(h, m);
        let eos_rows: Vec<usize> = (0..n).map(|i| i * seq + self.n_patches).collect();
        let summary = tape.gather_rows(out, &eos_rows);
        let patch_rows: Vec<usize> = (0..n).flat_map(|i| (0..self.n_patches).map(move |p| i * seq + p)).collect();
        let patch_tokens = tape.gather_rows(x, &patch_rows);
        Ok(PatchOutput {
            summary,
            patch_tokens,
            attention: att,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvgr_tensor::Tensor;

    #[test]
    fn shapes_and_identical_windows() {
        let spec = PatchSpec::default();
        let mut store = ParamStore::new(1);
        let enc = PatchEncoder::new(&mut store, "p", &spec, 16, 4, 32);
        let row: Vec<f64> = (0..336).map(|t| (t as f64 * 0.1).sin()).collect();
        let w = Tensor::from_rows(&[row.clone(), row]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&w);
        let out = enc.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(out.summary), (2, 16));
        assert_eq!(tape.shape(out.patch_tokens), (14, 16));
        let s = tape.value(out.summary);
        assert_eq!(s.row_slice(0), s.row_slice(1));
        assert_eq!(tape.attention_probs(out.attention).unwrap().len(), 2 * 4);
    }

    #[test]
    fn rejects_ragged_lookback() {
        assert!(PatchSpec { lookback: 100, ..PatchSpec::default() }.validate().is_err());
        let spec = PatchSpec::default();
        let mut store = ParamStore::new(1);
        let enc = PatchEncoder::new(&mut store, "p", &spec, 8, 2, 8);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(1, 300));
        assert!(enc.forward(&mut tape, &store, x).is_err());
    }
}
