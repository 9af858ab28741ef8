//! Dual cross-attention, view fusion, county pooling and the Stage-1 model.

use mvgr_tensor::layers::Linear;
use mvgr_tensor::{Block, Init, ParamId, ParamStore, Tape, Var};

use crate::error::{Error, Result};
use crate::mobility::MobilityEncoder;
use crate::nn::AttentionalPooling;
use crate::poi::{CategoryEncoder, PoiFeatures, SemanticPooling};

/// Shared `W_Q`, `W_K`, `W_V` for both attention directions.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub dim: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            wq: store.add(&format!("{name}.wq"), dim, dim, Init::FanIn),
            wk: store.add(&format!("{name}.wk"), dim, dim, Init::FanIn),
            wv: store.add(&format!("{name}.wv"), dim, dim, Init::FanIn),
            dim,
        }
    }
}

pub struct CrossOutput {
    pub m_att: Var,
    pub i_att: Var,
}

/// `M_att = softmax((Z_M W_Q)(Z_P W_K)ᵀ/√d)(Z_P W_V)` and `I_att` with the views
/// swapped; attention runs over the region axis.
pub fn dual_cross_attention(tape: &mut Tape, store: &ParamStore, p: &CrossAttention, z_m: Var, z_p: Var) -> Result<CrossOutput> {
    let (nm, dm) = tape.shape(z_m);
    let (np, dp) = tape.shape(z_p);
    if nm != np {
        return Err(Error::Shape(format!("views are not row-aligned: {nm} vs {np} regions")));
    }
    if dm != p.dim || dp != p.dim {
        return Err(Error::Shape(format!("views must be {} wide", p.dim)));
    }
    let (wq, wk, wv) = (tape.param(store, p.wq), tape.param(store, p.wk), tape.param(store, p.wv));
    let block = [Block::new(0, nm, 0, nm)];
    let qm = tape.matmul(z_m, wq);
    let kp = tape.matmul(z_p, wk);
    let vp = tape.matmul(z_p, wv);
    let m_att = tape.attention(qm, kp, vp, 1, &block);
    let qp = tape.matmul(z_p, wq);
    let km = tape.matmul(z_m, wk);
    let vm = tape.matmul(z_m, wv);
    let i_att = tape.attention(qp, km, vm, 1, &block);
    Ok(CrossOutput { m_att, i_att })
}

/// `Linear(Concat(I_att, M_att))` from `2d` to `d`.
pub fn fuse_views(tape: &mut Tape, store: &ParamStore, proj: &Linear, i_att: Var, m_att: Var) -> Result<Var> {
    if tape.shape(i_att) != tape.shape(m_att) {
        return Err(Error::Shape("fused views differ in shape".into()));
    }
    let cat = tape.concat_cols(&[i_att, m_att]);
    Ok(proj.forward(tape, store, cat))
}

/// County rows by attentional pooling over member-grid rows of `z_f`.
pub fn pool_to_county(
    tape: &mut Tape,
    store: &ParamStore,
    pool: &AttentionalPooling,
    z_f: Var,
    members: &[Vec<usize>],
) -> Result<(Var, Var)> {
    let mut order = Vec::new();
    let mut groups = Vec::with_capacity(members.len());
    for (c, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(Error::Invalid(format!("county {c} has no grids")));
        }
        groups.push((order.len(), m.len()));
        order.extend_from_slice(m);
    }
    let tokens = tape.gather_rows(z_f, &order);
    pool.forward(tape, store, tokens, &groups)
}

/// Fixed inputs of Stage 1.
#[derive(Debug, Clone)]
pub struct Stage1Inputs {
    pub poi: PoiFeatures,
    /// `N_r × 199` z-scored mobility profiles.
    pub profiles: mvgr_tensor::Tensor,
    /// Member grids per county.
    pub members: Vec<Vec<usize>>,
}

impl Stage1Inputs {
    pub fn n_grids(&self) -> usize {
        self.poi.n_grids()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Stage1Model {
    pub fs: CategoryEncoder,
    pub fh: CategoryEncoder,
    pub semantic: SemanticPooling,
    pub mobility: MobilityEncoder,
    pub cross: CrossAttention,
    pub fuse: Linear,
    pub county_pool: AttentionalPooling,
    pub dim: usize,
    /// Adds each view to the cross-attention output that it queries.
    pub residual: bool,
}

pub struct Stage1Vars {
    pub z_p: Var,
    pub z_m: Var,
    pub m_att: Var,
    pub i_att: Var,
    pub z_f: Var,
    pub h: Var,
    pub county_attention: Var,
}

impl Stage1Model {
    pub fn new(
        store: &mut ParamStore,
        n_primary: usize,
        n_secondary: usize,
        text_dim: usize,
        dim: usize,
        heads: usize,
        mobility_hidden: usize,
    ) -> Self {
        Self {
            fs: CategoryEncoder::new(store, "poi.fs", n_primary, dim),
            fh: CategoryEncoder::new(store, "poi.fh", n_secondary, dim),
            semantic: SemanticPooling::new(store, "semantic", text_dim, dim, heads),
            mobility: MobilityEncoder::new(store, "mobility", mobility_hidden, dim, heads),
            cross: CrossAttention::new(store, "cross", dim),
            fuse: Linear::new(store, "fuse", 2 * dim, dim, true),
            county_pool: AttentionalPooling::new(store, "county_pool", dim, heads),
            dim,
            residual: true,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, inputs: &Stage1Inputs) -> Result<Stage1Vars> {
        if inputs.profiles.rows() != inputs.n_grids() {
            return Err(Error::Shape("profiles and POI features cover different grids".into()));
        }
        let sem = self.semantic.forward(tape, store, &self.fs, &self.fh, &inputs.poi)?;
        let prof = tape.constant(&inputs.profiles);
        let z_m = self.mobility.forward(tape, store, prof)?;
        let cross = dual_cross_attention(tape, store, &self.cross, z_m, sem.z_p)?;
        let (i_att, m_att) = if self.residual {
            (tape.add(cross.i_att, sem.z_p), tape.add(cross.m_att, z_m))
        } else {
            (cross.i_att, cross.m_att)
        };
        let z_f = fuse_views(tape, store, &self.fuse, i_att, m_att)?;
        let (h, county_attention) = pool_to_county(tape, store, &self.county_pool, z_f, &inputs.members)?;
        Ok(Stage1Vars {
            z_p: sem.z_p,
            z_m,
            m_att,
            i_att,
            z_f,
            h,
            county_attention,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mvgr_tensor::Tensor;

    #[test]
    fn symmetric_views_give_equal_outputs() {
        let mut store = ParamStore::new(0);
        let ca = CrossAttention::new(&mut store, "c", 3);
        for id in [ca.wq, ca.wk, ca.wv] {
            store.set(id, Tensor::identity(3)).unwrap();
        }
        let z = Tensor::from_rows(&[vec![1.0, 0.5, -0.2], vec![0.0, 1.0, 0.3], vec![-0.7, 0.1, 0.9]]).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(&z);
        let b = tape.constant(&z);
        let out = dual_cross_attention(&mut tape, &store, &ca, a, b).unwrap();
        assert_eq!(tape.value(out.m_att).data(), tape.value(out.i_att).data());
        for p in tape.attention_probs(out.m_att).unwrap() {
            for row in p.chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_region_returns_projected_other_view() {
        let mut store = ParamStore::new(2);
        let ca = CrossAttention::new(&mut store, "c", 4);
        let mut tape = Tape::new();
        let zm = tape.constant(&Tensor::row(&[0.3, -0.1, 0.8, 0.2]));
        let zp = tape.constant(&Tensor::row(&[1.0, 2.0, -1.0, 0.5]));
        let out = dual_cross_attention(&mut tape, &store, &ca, zm, zp).unwrap();
        assert_eq!(tape.attention_probs(out.m_att).unwrap()[0], vec![1.0]);
        let expect = tape.value(zp).matmul(store.get(ca.wv)).unwrap();
        assert!(tape.value(out.m_att).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn misaligned_views_rejected() {
        let mut store = ParamStore::new(2);
        let ca = CrossAttention::new(&mut store, "c", 2);
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(2, 2));
        let b = tape.constant(&Tensor::zeros(3, 2));
        assert!(dual_cross_attention(&mut tape, &store, &ca, a, b).is_err());
    }

    #[test]
    fn fuse_zero_inputs_give_bias_and_reparameterize() {
        let mut store = ParamStore::new(5);
        let lin = Linear::new(&mut store, "f", 4, 2, true);
        store.set(lin.b.unwrap(), Tensor::row(&[0.5, -1.5])).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(3, 2));
        let out = fuse_views(&mut tape, &store, &lin, z, z).unwrap();
        for r in 0..3 {
            assert_eq!(tape.value(out).row_slice(r), &[0.5, -1.5]);
        }
        // Swapping concat order with the weight rows swapped is the same map.
        let i = tape.constant(&Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap());
        let m = tape.constant(&Tensor::from_rows(&[vec![0.3, 0.0], vec![2.0, -2.0]]).unwrap());
        let a = fuse_views(&mut tape, &store, &lin, i, m).unwrap();
        let w = store.get(lin.w).clone();
        let mut swapped = Tensor::zeros(4, 2);
        for r in 0..4 {
            for c in 0..2 {
                swapped.set((r + 2) % 4, c, w.get(r, c));
            }
        }
        let mut s2 = store.clone();
        s2.set(lin.w, swapped).unwrap();
        let mut t2 = Tape::new();
        let i2 = t2.constant(tape.value(i));
        let m2 = t2.constant(tape.value(m));
        let b = fuse_views(&mut t2, &s2, &lin, m2, i2).unwrap();
        assert_eq!(tape.value(a).data(), t2.value(b).data());
    }

    #[test]
    fn county_pooling_is_order_invariant_and_normalized() {
        let mut store = ParamStore::new(8);
        let pool = AttentionalPooling::new(&mut store, "cp", 4, 2);
        let z = Tensor::from_rows(&(0..6).map(|i| vec![i as f64 * 0.3, 1.0 - i as f64 * 0.2, 0.1, -0.4]).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new();
        let zf = tape.constant(&z);
        let (h1, att) = pool_to_county(&mut tape, &store, &pool, zf, &[vec![0, 1, 2], vec![3], vec![4, 5]]).unwrap();
        let (h2, _) = pool_to_county(&mut tape, &store, &pool, zf, &[vec![2, 0, 1], vec![3], vec![5, 4]]).unwrap();
        assert!(tape.value(h1).max_abs_diff(tape.value(h2)) < 1e-12);
        for p in tape.attention_probs(att).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(pool_to_county(&mut tape, &store, &pool, zf, &[vec![0], vec![]]).is_err());
    }
}
