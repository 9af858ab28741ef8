//! Layers shared by several stages.

use mvgr_tensor::layers::{multi_head_attention_with_weights, MultiHeadAttention};
use mvgr_tensor::{Block, Init, ParamId, ParamStore, Tape, Tensor, Var};

use crate::error::Result;

/// A learned query row attending over groups of token rows, one output row per group.
#[derive(Debug, Clone, Copy)]
pub struct AttentionalPooling {
    pub query: ParamId,
    pub mha: MultiHeadAttention,
}

impl AttentionalPooling {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Self {
        Self {
            query: store.add(&format!("{name}.query"), 1, dim, Init::Uniform(0.5)),
            mha: MultiHeadAttention::new(store, &format!("{name}.mha"), dim, heads),
        }
    }

    /// Pools `tokens` over `groups` of `(start, len)` rows. Returns the pooled
    /// rows and the raw attention node (for weight inspection).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, groups: &[(usize, usize)]) -> Result<(Var, Var)> {
        let ones = tape.constant(&Tensor::full(groups.len(), 1, 1.0));
        let q = tape.param(store, self.query);
        let queries = tape.matmul(ones, q);
        let blocks: Vec<Block> = groups.iter().enumerate().map(|(i, &(s, l))| Block::new(i, 1, s, l)).collect();
        let p = self.mha.vars(tape, store);
        Ok(multi_head_attention_with_weights(tape, queries, tokens, tokens, self.mha.heads, p, &blocks)?)
    }
}

/// Broadcasts a `1 × d` row to `n × d`.
pub fn repeat_row(tape: &mut Tape, row: Var, n: usize) -> Var {
    let ones = tape.constant(&Tensor::full(n, 1, 1.0));
    tape.matmul(ones, row)
}
