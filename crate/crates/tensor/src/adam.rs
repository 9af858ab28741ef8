use std::collections::BTreeMap;

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// First/second moment buffers for a list of parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn for_params(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

fn check_betas(beta1: f64, beta2: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
        return Err(Error::Invalid(format!("Adam betas must lie in [0, 1), got {beta1}, {beta2}")));
    }
    Ok(())
}

#[inline]
fn update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        p[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// One bias-corrected Adam step over `params` in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check_betas(beta1, beta2)?;
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(shape_err(
            "adam_step",
            format!("{} params, {} grads, {} moment buffers", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != p.len() || state.v[i].len() != p.len() {
            return Err(shape_err("adam_step", format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
    }
    state.t += 1;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        update(p.data_mut(), g.data(), m, v, state.t, lr, beta1, beta2, eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adam over a [`ParamStore`]; frozen parameters are never touched.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Result<Self> {
        check_betas(config.beta1, config.beta2)?;
        Ok(Self {
            config,
            moments: BTreeMap::new(),
            t: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from `(param, gradient)` pairs.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        let mut scale = 1.0;
        if let Some(max) = self.config.clip_norm {
            let norm = grads
                .iter()
                .filter(|(id, _)| store.is_trainable(*id))
                .flat_map(|(_, g)| g.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite("gradient norm"));
            }
            if norm > max {
                scale = max / norm;
            }
        }
        self.t += 1;
        let c = self.config;
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            let p = store.get_mut(*id);
            if p.len() != g.len() {
                return Err(shape_err("Adam::step", format!("parameter has {} values, gradient {}", p.len(), g.len())));
            }
            let (m, v) = self.moments.entry(*id).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            if scale != 1.0 {
                let gs: Vec<f64> = g.iter().map(|x| x * scale).collect();
                update(p.data_mut(), &gs, m, v, self.t, c.lr, c.beta1, c.beta2, c.eps);
            } else {
                update(p.data_mut(), g, m, v, self.t, c.lr, c.beta1, c.beta2, c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_step_closed_form() {
        let g = [0.3, -2.0, 1e-3];
        let mut p = vec![Tensor::row(&[1.0, 1.0, 1.0])];
        let mut st = AdamState::for_params(&p);
        let (lr, eps) = (0.01, 1e-8);
        adam_step(&mut p, &[Tensor::row(&g)], &mut st, lr, 0.9, 0.999, eps).unwrap();
        for (x, gi) in p[0].data().iter().zip(g) {
            let expect = 1.0 - lr * gi / (gi.abs() + eps);
            assert!((x - expect).abs() < 1e-12, "{x} vs {expect}");
        }
        assert_eq!(st.t, 1);
    }

    #[test]
    fn rejects_bad_betas_and_shapes() {
        let mut p = vec![Tensor::row(&[1.0])];
        let mut st = AdamState::for_params(&p);
        assert!(adam_step(&mut p, &[Tensor::row(&[1.0])], &mut st, 0.1, 1.0, 0.9, 1e-8).is_err());
        assert!(adam_step(&mut p, &[Tensor::row(&[1.0, 2.0])], &mut st, 0.1, 0.9, 0.9, 1e-8).is_err());
    }

    /// Plain scalar Adam recurrence, written independently of `update`.
    fn scalar_adam_trajectory(x0: f64, steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut out = vec![x];
        for t in 1..=steps {
            let g = 2.0 * (x - 5.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn quadratic_matches_scalar_recurrence() {
        let oracle = scalar_adam_trajectory(0.0, 100, 0.1);
        let mut p = vec![Tensor::row(&[0.0])];
        let mut st = AdamState::for_params(&p);
        let mut traj = vec![0.0];
        for _ in 0..100 {
            let g = Tensor::row(&[2.0 * (p[0].data()[0] - 5.0)]);
            adam_step(&mut p, &[g], &mut st, 0.1, 0.9, 0.999, 1e-8).unwrap();
            traj.push(p[0].data()[0]);
        }
        for (a, b) in traj.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        let err: Vec<f64> = traj.iter().map(|x| (x - 5.0).abs()).collect();
        // From x0 = 0 the iterate climbs steadily toward 5 (≈ lr per step)
        // before the momentum overshoot, so the distance shrinks
        // monotonically over the burn-in-free prefix.
        let first_close = err.iter().position(|&e| e < 0.5).unwrap();
        assert!(err[..=first_close].windows(2).all(|w| w[1] <= w[0]));
        assert!(err[100] < 0.5, "final error {}", err[100]);
    }

    proptest! {
        #[test]
        fn zero_gradient_is_identity_from_fresh_state(vals in proptest::collection::vec(-10.0f64..10.0, 1..8), lr in 1e-4f64..1.0) {
            let mut p = vec![Tensor::row(&vals)];
            let mut st = AdamState::for_params(&p);
            adam_step(&mut p, &[Tensor::zeros(1, vals.len())], &mut st, lr, 0.9, 0.999, 1e-8).unwrap();
            prop_assert_eq!(p[0].data(), &vals[..]);
        }
    }

    #[test]
    fn store_adam_skips_frozen() {
        let mut s = ParamStore::new(0);
        let a = s.add("a", 1, 2, crate::Init::Constant(1.0));
        let b = s.add("b", 1, 2, crate::Init::Constant(1.0));
        s.set_trainable(b, false);
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        opt.step(&mut s, &[(a, vec![1.0, 1.0]), (b, vec![1.0, 1.0])]).unwrap();
        assert!(s.get(a).data()[0] < 1.0);
        assert_eq!(s.get(b).data(), &[1.0, 1.0]);
    }
}
