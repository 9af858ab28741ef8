//! Grid-level semantic representation: per-view mean pooling of POI features
//! followed by attentional pooling over the three view slots.

use mvgr_tensor::layers::Linear;
use mvgr_tensor::{Init, ParamId, ParamStore, Tape, Tensor, Var};

use super::encoder::CategoryEncoder;
use super::text::{category_text_features, TextEmbedder};
use crate::error::{Error, Result};
use crate::nn::AttentionalPooling;
use crate::synth::City;

/// Per-grid category mixtures; the mean of one-hot rows over a grid's POIs.
#[derive(Debug, Clone, PartialEq)]
pub struct PoiFeatures {
    /// `N_r × n_p`
    pub primary_mix: Tensor,
    /// `N_r × n_c`
    pub secondary_mix: Tensor,
    /// `n_c × d_t` embedded category descriptions.
    pub text: Tensor,
    pub poi_counts: Vec<usize>,
}

impl PoiFeatures {
    pub fn n_grids(&self) -> usize {
        self.poi_counts.len()
    }

    pub fn nonempty_mask(&self) -> Tensor {
        Tensor::matrix(self.n_grids(), 1, self.poi_counts.iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }).collect())
    }
}

/// Builds mixtures from `members[g]`, the POI indices of grid `g` (any order).
pub fn poi_features_from(
    city: &City,
    members: &[Vec<usize>],
    embedder: &dyn TextEmbedder,
) -> Result<PoiFeatures> {
    let (n_p, n_c) = (city.vocab.n_primary(), city.vocab.n_secondary());
    let n = members.len();
    let mut primary = Tensor::zeros(n, n_p);
    let mut secondary = Tensor::zeros(n, n_c);
    for (g, list) in members.iter().enumerate() {
        let mut cp = vec![0usize; n_p];
        let mut cs = vec![0usize; n_c];
        for &i in list {
            let p = city.pois.get(i).ok_or_else(|| Error::Invalid(format!("unknown poi {i}")))?;
            cp[p.primary] += 1;
            cs[p.secondary] += 1;
        }
        let len = list.len().max(1) as f64;
        for (j, c) in cp.into_iter().enumerate() {
            primary.set(g, j, c as f64 / len);
        }
        for (j, c) in cs.into_iter().enumerate() {
            secondary.set(g, j, c as f64 / len);
        }
    }
    Ok(PoiFeatures {
        primary_mix: primary,
        secondary_mix: secondary,
        text: category_text_features(&city.vocab, embedder)?,
        poi_counts: members.iter().map(Vec::len).collect(),
    })
}

pub fn poi_features(city: &City, embedder: &dyn TextEmbedder) -> Result<PoiFeatures> {
    poi_features_from(city, &city.pois_by_grid(), embedder)
}

/// Text projection, attentional pooling and the learned empty-grid row.
#[derive(Debug, Clone, Copy)]
pub struct SemanticPooling {
    pub text_proj: Linear,
    pub pool: AttentionalPooling,
    pub empty: ParamId,
    pub dim: usize,
}

pub struct SemanticOutput {
    /// `N_r × d`
    pub z_p: Var,
    /// Grid-major view slots, `3 N_r × d`.
    pub slots: Var,
    /// Attention node of the pooling step.
    pub attention: Var,
}

impl SemanticPooling {
    pub fn new(store: &mut ParamStore, name: &str, text_dim: usize, dim: usize, heads: usize) -> Self {
        Self {
            text_proj: Linear::new(store, &format!("{name}.text_proj"), text_dim, dim, true),
            pool: AttentionalPooling::new(store, &format!("{name}.pool"), dim, heads),
            empty: store.add(&format!("{name}.empty"), 1, dim, Init::Uniform(0.5)),
            dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fs: &CategoryEncoder,
        fh: &CategoryEncoder,
        feats: &PoiFeatures,
    ) -> Result<SemanticOutput> {
        let n = feats.n_grids();
        if fs.dim != self.dim || fh.dim != self.dim {
            return Err(Error::Shape("encoder widths differ from the pooling width".into()));
        }
        let es = fs.encode_all(tape, store);
        let eh = fh.encode_all(tape, store);
        let mp = tape.constant(&feats.primary_mix);
        let ms = tape.constant(&feats.secondary_mix);
        let v1 = tape.matmul(mp, es);
        let v2 = tape.matmul(ms, eh);
        let txt = tape.constant(&feats.text);
        let grid_txt = tape.matmul(ms, txt);
        let v3 = self.text_proj.forward(tape, store, grid_txt);
        let cat = tape.concat_cols(&[v1, v2, v3]);
        let slots = tape.reshape(cat, 3 * n, self.dim);
        let groups: Vec<(usize, usize)> = (0..n).map(|g| (3 * g, 3)).collect();
        let (pooled, attention) = self.pool.forward(tape, store, slots, &groups)?;
        let mask = feats.nonempty_mask();
        let inv = mask.map(|m| 1.0 - m);
        let mask = tape.constant(&mask);
        let inv = tape.constant(&inv);
        let kept = tape.mul_col(pooled, mask);
        let e = tape.param(store, self.empty);
        let filler = tape.matmul(inv, e);
        let z_p = tape.add(kept, filler);
        Ok(SemanticOutput { z_p, slots, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poi::text::HashedEmbedder;
    use crate::synth::{generate_city, CityConfig};
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (City, ParamStore, CategoryEncoder, CategoryEncoder, SemanticPooling) {
        let city = generate_city(&CityConfig {
            hex_radius: 2,
            ..CityConfig::default()
        })
        .unwrap();
        let mut store = ParamStore::new(4);
        let fs = CategoryEncoder::new(&mut store, "fs", city.vocab.n_primary(), 8);
        let fh = CategoryEncoder::new(&mut store, "fh", city.vocab.n_secondary(), 8);
        let sp = SemanticPooling::new(&mut store, "sem", 64, 8, 2);
        (city, store, fs, fh, sp)
    }

    #[test]
    fn pooling_weights_sum_to_one() {
        let (city, store, fs, fh, sp) = setup();
        let feats = poi_features(&city, &HashedEmbedder::default()).unwrap();
        let mut tape = Tape::new();
        let out = sp.forward(&mut tape, &store, &fs, &fh, &feats).unwrap();
        assert_eq!(tape.shape(out.z_p), (city.n_grids(), 8));
        for p in tape.attention_probs(out.attention).unwrap() {
            assert_eq!(p.len(), 3);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn invariant_to_poi_order() {
        let (city, store, fs, fh, sp) = setup();
        let emb = HashedEmbedder::default();
        let base = city.pois_by_grid();
        let mut tape = Tape::new();
        let reference = sp.forward(&mut tape, &store, &fs, &fh, &poi_features_from(&city, &base, &emb).unwrap()).unwrap();
        let reference = tape.value(reference.z_p).clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let mut shuffled = base.clone();
            shuffled.iter_mut().for_each(|g| g.shuffle(&mut rng));
            let mut t = Tape::new();
            let out = sp.forward(&mut t, &store, &fs, &fh, &poi_features_from(&city, &shuffled, &emb).unwrap()).unwrap();
            assert_eq!(t.value(out.z_p).data(), reference.data());
        }
    }

    #[test]
    fn empty_grid_gets_learned_default() {
        let (city, store, fs, fh, sp) = setup();
        let mut members = city.pois_by_grid();
        members[0].clear();
        let feats = poi_features_from(&city, &members, &HashedEmbedder::default()).unwrap();
        let mut tape = Tape::new();
        let out = sp.forward(&mut tape, &store, &fs, &fh, &feats).unwrap();
        assert_eq!(tape.value(out.z_p).row_slice(0), store.get(sp.empty).data());
    }

    #[test]
    fn singleton_pooling_with_identity_projections() {
        let mut store = ParamStore::new(0);
        let pool = AttentionalPooling::new(&mut store, "p", 4, 1);
        for id in [pool.mha.wv, pool.mha.wo] {
            store.set(id, Tensor::identity(4)).unwrap();
        }
        let v = vec![0.2, -0.4, 1.0, 0.5];
        let mut tape = Tape::new();
        let tokens = tape.constant(&Tensor::from_rows(&[v.clone(), v.clone(), v.clone()]).unwrap());
        let (out, _) = pool.forward(&mut tape, &store, tokens, &[(0, 3)]).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(&v) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
