//! Low-rank adapters on frozen projections.

use mvgr_tensor::{Init, ParamId, ParamStore, Tape, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct LoraAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub scale: f64,
}

impl LoraAdapter {
    /// `W_down` is fan-in initialized and `W_up` starts at zero, so a fresh
    /// adapter leaves the base map unchanged.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rank: usize, scale: f64) -> Result<Self> {
        if rank == 0 || rank > fan_in.min(fan_out) {
            return Err(Error::Config(format!("LoRA rank {rank} must lie in 1..={}", fan_in.min(fan_out))));
        }
        if !(scale >= 1.0) {
            return Err(Error::Config(format!("LoRA scale {scale} must be at least 1")));
        }
        Ok(Self {
            down: store.add(&format!("{name}.down"), fan_in, rank, Init::FanIn),
            up: store.add(&format!("{name}.up"), rank, fan_out, Init::Zeros),
            rank,
            scale,
        })
    }
}

/// `h = xW + ς · x W_down W_up`; without an adapter, `h = xW`.
pub fn lora_linear(tape: &mut Tape, store: &ParamStore, x: Var, w: Var, adapter: Option<&LoraAdapter>) -> Result<Var> {
    let (_, d) = tape.shape(x);
    let (wr, wc) = tape.shape(w);
    if d != wr {
        return Err(Error::Shape(format!("input width {d} does not match weight {wr}x{wc}")));
    }
    let base = tape.matmul(x, w);
    let Some(a) = adapter else {
        return Ok(base);
    };
    let down = tape.param(store, a.down);
    let up = tape.param(store, a.up);
    if tape.shape(down).0 != wr || tape.shape(up).1 != wc {
        return Err(Error::Shape("adapter shape does not match the base weight".into()));
    }
    let xd = tape.matmul(x, down);
    let delta = tape.matmul(xd, up);
    let delta = tape.scale(delta, a.scale);
    Ok(tape.add(base, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvgr_tensor::Tensor;

    #[test]
    fn zero_up_is_identity_and_scale_is_linear() {
        let mut store = ParamStore::new(3);
        let w = store.add("w", 4, 3, Init::FanIn);
        let a = LoraAdapter::new(&mut store, "a", 4, 3, 2, 1.0).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5, 0.3], vec![0.0, 1.0, 1.0, -1.0]]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let wv = tape.param(&store, w);
        let base = lora_linear(&mut tape, &store, xv, wv, None).unwrap();
        let with = lora_linear(&mut tape, &store, xv, wv, Some(&a)).unwrap();
        assert_eq!(tape.value(base).data(), tape.value(with).data());

        store.set(a.up, Tensor::full(2, 3, 0.25)).unwrap();
        let two = LoraAdapter { scale: 2.0, ..a };
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let wv = tape.param(&store, w);
        let base = lora_linear(&mut tape, &store, xv, wv, None).unwrap();
        let h1 = lora_linear(&mut tape, &store, xv, wv, Some(&a)).unwrap();
        let h2 = lora_linear(&mut tape, &store, xv, wv, Some(&two)).unwrap();
        let (b, h1, h2) = (tape.value(base), tape.value(h1), tape.value(h2));
        for i in 0..b.len() {
            let d1 = h1.data()[i] - b.data()[i];
            let d2 = h2.data()[i] - b.data()[i];
            assert!((d2 - 2.0 * d1).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_and_scale_validated() {
        let mut store = ParamStore::new(0);
        assert!(LoraAdapter::new(&mut store, "a", 4, 3, 4, 2.0).is_err());
        assert!(LoraAdapter::new(&mut store, "b", 4, 3, 2, 0.5).is_err());
    }
}
