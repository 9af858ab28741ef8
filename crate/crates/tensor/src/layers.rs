//! Parameterized building blocks recorded onto a [`Tape`].

use crate::error::{shape_err, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Block, Tape, Var};

/// `x · W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.add(&format!("{name}.w"), fan_in, fan_out, Init::FanIn);
        let b = bias.then(|| store.add(&format!("{name}.b"), 1, fan_out, Init::Zeros));
        Self { w, b, fan_in, fan_out }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.add(&format!("{name}.w"), fan_in, fan_out, Init::Zeros);
        let b = bias.then(|| store.add(&format!("{name}.b"), 1, fan_out, Init::Zeros));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), fan_in, hidden, true),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, fan_out, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(tape, store, x);
        let h = tape.gelu(h);
        self.l2.forward(tape, store, h)
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(&format!("{name}.gain"), 1, dim, Init::Constant(1.0)),
            bias: store.add(&format!("{name}.bias"), 1, dim, Init::Zeros),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm_rows(x, 1e-5);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

/// Projection matrices of one multi-head attention layer, already on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MhaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Multi-head attention: `concat_h softmax(Q_h K_hᵀ / sqrt(d_h)) V_h` followed
/// by the output projection, with `Q = q_in·W_Q`, `K = k_in·W_K`, `V = v_in·W_V`.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    heads: usize,
    params: MhaVars,
    blocks: &[Block],
) -> Result<Var> {
    multi_head_attention_with_weights(tape, q_in, k_in, v_in, heads, params, blocks).map(|(out, _)| out)
}

/// As [`multi_head_attention`], also returning the attention node so its
/// weights can be read back with [`Tape::attention_probs`].
pub fn multi_head_attention_with_weights(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    heads: usize,
    params: MhaVars,
    blocks: &[Block],
) -> Result<(Var, Var)> {
    let (_, d) = tape.shape(q_in);
    for (name, w) in [("W_Q", params.wq), ("W_K", params.wk), ("W_V", params.wv), ("W_O", params.wo)] {
        if tape.shape(w) != (d, d) {
            return Err(shape_err("multi_head_attention", format!("{name} is {:?}, expected {d}x{d}", tape.shape(w))));
        }
    }
    if tape.shape(k_in).1 != d || tape.shape(v_in).1 != d {
        return Err(shape_err("multi_head_attention", "query, key and value inputs must share the model width"));
    }
    if tape.shape(k_in).0 != tape.shape(v_in).0 {
        return Err(shape_err("multi_head_attention", "key and value inputs need the same row count"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(shape_err("multi_head_attention", format!("model width {d} not divisible by {heads} heads")));
    }
    let nq = tape.shape(q_in).0;
    let nk = tape.shape(k_in).0;
    for b in blocks {
        if b.q_start + b.q_len > nq || b.k_start + b.k_len > nk || b.k_len == 0 {
            return Err(shape_err("multi_head_attention", format!("block {b:?} outside {nq}x{nk}")));
        }
    }
    let q = tape.matmul(q_in, params.wq);
    let k = tape.matmul(k_in, params.wk);
    let v = tape.matmul(v_in, params.wv);
    let a = tape.attention(q, k, v, heads, blocks);
    Ok((tape.matmul(a, params.wo), a))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "{dim} not divisible by {heads} heads");
        Self {
            wq: store.add(&format!("{name}.wq"), dim, dim, Init::FanIn),
            wk: store.add(&format!("{name}.wk"), dim, dim, Init::FanIn),
            wv: store.add(&format!("{name}.wv"), dim, dim, Init::FanIn),
            wo: store.add(&format!("{name}.wo"), dim, dim, Init::FanIn),
            heads,
            dim,
        }
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> MhaVars {
        MhaVars {
            wq: tape.param(store, self.wq),
            wk: tape.param(store, self.wk),
            wv: tape.param(store, self.wv),
            wo: tape.param(store, self.wo),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: Var,
        k_in: Var,
        v_in: Var,
        blocks: &[Block],
    ) -> Result<Var> {
        let p = self.vars(tape, store);
        multi_head_attention(tape, q_in, k_in, v_in, self.heads, p, blocks)
    }
}
