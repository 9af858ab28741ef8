//! Small causal transformer used as the frozen forecasting backbone, and its
//! next-patch pretraining.

use std::path::Path;

use mvgr_tensor::layers::{Linear, LayerNorm, Mlp, MultiHeadAttention};
use mvgr_tensor::{Adam, AdamConfig, Block, Init, ParamId, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::lora::{lora_linear, LoraAdapter};
use crate::checkpoint::{self, round_f32, Manifest};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            layers: 2,
            mlp_hidden: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) || self.layers == 0 {
            return Err(Error::Config(format!(
                "backbone needs layers >= 1 and dim {} divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BackboneLayer {
    pub ln1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

/// Adapters on `W_Q`, `W_K`, `W_V` of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerAdapters {
    pub q: LoraAdapter,
    pub k: LoraAdapter,
    pub v: LoraAdapter,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layers: Vec<BackboneLayer>,
    pub ln_f: LayerNorm,
}

/// One block per query row so each position sees itself and earlier rows of
/// its own sequence.
pub fn causal_blocks(n: usize, seq: usize) -> Vec<Block> {
    (0..n)
        .flat_map(|s| (0..seq).map(move |i| Block::new(s * seq + i, 1, s * seq, i + 1)))
        .collect()
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, config: BackboneConfig) -> Self {
        let layers = (0..config.layers)
            .map(|l| BackboneLayer {
                ln1: LayerNorm::new(store, &format!("{name}.l{l}.ln1"), config.dim),
                attention: MultiHeadAttention::new(store, &format!("{name}.l{l}.attn"), config.dim, config.heads),
                ln2: LayerNorm::new(store, &format!("{name}.l{l}.ln2"), config.dim),
                mlp: Mlp::new(store, &format!("{name}.l{l}.mlp"), config.dim, config.mlp_hidden, config.dim),
            })
            .collect();
        Self {
            config,
            layers,
            ln_f: LayerNorm::new(store, &format!("{name}.ln_f"), config.dim),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for l in &self.layers {
            ids.extend([l.ln1.gain, l.ln1.bias, l.attention.wq, l.attention.wk, l.attention.wv, l.attention.wo]);
            ids.extend([l.ln2.gain, l.ln2.bias, l.mlp.l1.w, l.mlp.l2.w]);
            ids.extend(l.mlp.l1.b.into_iter().chain(l.mlp.l2.b));
        }
        ids.extend([self.ln_f.gain, self.ln_f.bias]);
        ids
    }

    pub fn freeze(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            store.set_trainable(id, false);
        }
    }

    pub fn new_adapters(&self, store: &mut ParamStore, name: &str, rank: usize, scale: f64) -> Result<Vec<LayerAdapters>> {
        let d = self.config.dim;
        (0..self.layers.len())
            .map(|l| {
                Ok(LayerAdapters {
                    q: LoraAdapter::new(store, &format!("{name}.l{l}.q"), d, d, rank, scale)?,
                    k: LoraAdapter::new(store, &format!("{name}.l{l}.k"), d, d, rank, scale)?,
                    v: LoraAdapter::new(store, &format!("{name}.l{l}.v"), d, d, rank, scale)?,
                })
            })
            .collect()
    }

    /// Pre-LN causal transformer over `n` sequences of `seq` rows stacked in
    /// `x` (`(n · seq) × d`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, seq: usize, adapters: Option<&[LayerAdapters]>) -> Result<Var> {
        let (rows, d) = tape.shape(x);
        if d != self.config.dim || seq == 0 || rows % seq != 0 {
            return Err(Error::Shape(format!("backbone input {rows}x{d} is not sequences of {seq} rows of width {}", self.config.dim)));
        }
        if let Some(a) = adapters {
            if a.len() != self.layers.len() {
                return Err(Error::Shape(format!("{} adapter sets for {} layers", a.len(), self.layers.len())));
            }
        }
        let blocks = causal_blocks(rows / seq, seq);
        let mut h = x;
        for (li, layer) in self.layers.iter().enumerate() {
            let ad = adapters.map(|a| &a[li]);
            let n1 = layer.ln1.forward(tape, store, h);
            let p = layer.attention.vars(tape, store);
            let q = lora_linear(tape, store, n1, p.wq, ad.map(|a| &a.q))?;
            let k = lora_linear(tape, store, n1, p.wk, ad.map(|a| &a.k))?;
            let v = lora_linear(tape, store, n1, p.wv, ad.map(|a| &a.v))?;
            let att = tape.attention(q, k, v, self.config.heads, &blocks);
            let o = tape.matmul(att, p.wo);
            h = tape.add(h, o);
            let n2 = layer.ln2.forward(tape, store, h);
            let m = layer.mlp.forward(tape, store, n2);
            h = tape.add(h, m);
        }
        Ok(self.ln_f.forward(tape, store, h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackbonePretrainConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub patch: usize,
    pub n_patches: usize,
    pub corpus_size: usize,
    pub heldout_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BackbonePretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            backbone: BackboneConfig::default(),
            patch: 48,
            n_patches: 7,
            corpus_size: 256,
            heldout_size: 64,
            steps: 300,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

/// Generic rhythmic series: daily and weekly harmonics, a mild trend,
/// AR(1) noise and sparse bursts. Each series has `(n_patches + 1) · patch`
/// steps and is z-scored over its first `n_patches · patch` steps.
pub fn synthetic_corpus(n: usize, patch: usize, n_patches: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let len = (n_patches + 1) * patch;
    let ctx = n_patches * patch;
    (0..n)
        .map(|_| {
            let a1 = rng.gen_range(0.2..1.0);
            let a2 = rng.gen_range(0.0..0.5);
            let aw = rng.gen_range(0.0..0.4);
            let ph1 = rng.gen_range(0.0..std::f64::consts::TAU);
            let ph2 = rng.gen_range(0.0..std::f64::consts::TAU);
            let phw = rng.gen_range(0.0..std::f64::consts::TAU);
            let trend = rng.gen_range(-0.3..0.3) / len as f64;
            let sigma = rng.gen_range(0.02..0.2);
            let phi = rng.gen_range(0.0..0.8);
            let offset: usize = rng.gen_range(0..336);
            let mut ar = 0.0;
            let mut x: Vec<f64> = (0..len)
                .map(|t| {
                    let tt = (t + offset) as f64;
                    let day = std::f64::consts::TAU * tt / 48.0;
                    let week = std::f64::consts::TAU * tt / 336.0;
                    ar = phi * ar + sigma * normal.sample(&mut rng);
                    let burst = if rng.gen_bool(0.01) { rng.gen_range(0.5..1.5) } else { 0.0 };
                    2.0 + a1 * (day + ph1).sin() + a2 * (2.0 * day + ph2).sin() + aw * (week + phw).sin() + trend * tt + ar + burst
                })
                .collect();
            let mean = x[..ctx].iter().sum::<f64>() / ctx as f64;
            let sd = (x[..ctx].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ctx as f64).sqrt().max(1e-6);
            x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
            x
        })
        .collect()
}

/// Backbone plus the pretraining-only input embedding, positions and
/// next-patch head.
struct PretrainModel {
    embed: Linear,
    pos: ParamId,
    head: Linear,
    backbone: Backbone,
}

impl PretrainModel {
    fn new(store: &mut ParamStore, cfg: &BackbonePretrainConfig) -> Self {
        let d = cfg.backbone.dim;
        Self {
            embed: Linear::new(store, "pretrain.embed", cfg.patch, d, true),
            pos: store.add("pretrain.pos", cfg.n_patches, d, Init::Uniform(0.1)),
            head: Linear::new(store, "pretrain.head", d, cfg.patch, true),
            backbone: Backbone::new(store, "backbone", cfg.backbone),
        }
    }

    /// Mean squared next-patch error over all positions of `series`.
    fn loss(&self, tape: &mut Tape, store: &ParamStore, cfg: &BackbonePretrainConfig, series: &[&Vec<f64>]) -> Result<Var> {
        let (p, np) = (cfg.patch, cfg.n_patches);
        let n = series.len();
        let mut inputs = Vec::with_capacity(n * np * p);
        let mut targets = Vec::with_capacity(n * np * p);
        for s in series {
            inputs.extend_from_slice(&s[..np * p]);
            targets.extend_from_slice(&s[p..(np + 1) * p]);
        }
        let x = tape.constant(&Tensor::matrix(n * np, p, inputs));
        let y = tape.constant(&Tensor::matrix(n * np, p, targets));
        let e = self.embed.forward(tape, store, x);
        let pos = tape.param(store, self.pos);
        let idx: Vec<usize> = (0..n).flat_map(|_| 0..np).collect();
        let pos = tape.gather_rows(pos, &idx);
        let e = tape.add(e, pos);
        let h = self.backbone.forward(tape, store, e, np, None)?;
        let out = self.head.forward(tape, store, h);
        let diff = tape.sub(out, y);
        let sq = tape.square(diff);
        Ok(tape.mean(sq))
    }
}

/// Frozen-backbone weights with their pretraining provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneCheckpoint {
    pub config: BackboneConfig,
    pub seed: u64,
    /// `backbone.*` tensors, already rounded to binary32.
    pub tensors: Vec<(String, Tensor)>,
    pub initial_heldout_loss: f64,
    pub final_heldout_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    kind: String,
    config: BackboneConfig,
    seed: u64,
    initial_heldout_loss: f64,
    final_heldout_loss: f64,
}

impl BackboneCheckpoint {
    fn meta(&self) -> serde_json::Value {
        serde_json::to_value(CheckpointMeta {
            kind: "backbone".into(),
            config: self.config,
            seed: self.seed,
            initial_heldout_loss: self.initial_heldout_loss,
            final_heldout_loss: self.final_heldout_loss,
        })
        .expect("metadata serializes")
    }

    pub fn manifest(&self) -> Result<Manifest> {
        checkpoint::manifest_for(self.meta(), &self.tensors)
    }

    pub fn content_hash(&self) -> Result<String> {
        Ok(self.manifest()?.content_hash)
    }

    pub fn save(&self, dir: &Path) -> Result<Manifest> {
        checkpoint::save_tensors(dir, self.meta(), &self.tensors)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, tensors) = checkpoint::load_tensors(dir)?;
        let meta: CheckpointMeta = serde_json::from_value(m.meta)?;
        if meta.kind != "backbone" {
            return Err(Error::Integrity(format!("{}: not a backbone checkpoint", dir.display())));
        }
        Ok(Self {
            config: meta.config,
            seed: meta.seed,
            tensors,
            initial_heldout_loss: meta.initial_heldout_loss,
            final_heldout_loss: meta.final_heldout_loss,
        })
    }

    /// Inserts the backbone into `store` under the `backbone.` prefix, frozen.
    pub fn instantiate(&self, store: &mut ParamStore) -> Result<Backbone> {
        let bb = Backbone::new(store, "backbone", self.config);
        let ids = bb.param_ids();
        if ids.len() != self.tensors.len() {
            return Err(Error::Integrity(format!(
                "checkpoint has {} tensors, backbone expects {}",
                self.tensors.len(),
                ids.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store.id(name)?;
            store.set(id, t.clone())?;
        }
        bb.freeze(store);
        Ok(bb)
    }
}

pub struct BackbonePretrainLog {
    pub losses: Vec<f64>,
}

fn heldout_loss(model: &PretrainModel, store: &ParamStore, cfg: &BackbonePretrainConfig, heldout: &[Vec<f64>]) -> Result<f64> {
    let refs: Vec<&Vec<f64>> = heldout.iter().collect();
    let mut tape = Tape::new();
    let l = model.loss(&mut tape, store, cfg, &refs)?;
    Ok(tape.scalar(l))
}

pub fn pretrain_backbone(cfg: &BackbonePretrainConfig) -> Result<(BackboneCheckpoint, BackbonePretrainLog)> {
    cfg.backbone.validate()?;
    if cfg.patch == 0 || cfg.n_patches < 2 || cfg.corpus_size == 0 || cfg.heldout_size == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("pretraining needs patch > 0, n_patches >= 2 and nonempty corpora".into()));
    }
    let corpus = synthetic_corpus(cfg.corpus_size, cfg.patch, cfg.n_patches, mvgr_tensor::derive_seed(cfg.seed, "backbone.corpus"));
    let heldout = synthetic_corpus(cfg.heldout_size, cfg.patch, cfg.n_patches, mvgr_tensor::derive_seed(cfg.seed, "backbone.heldout"));
    let mut store = ParamStore::new(mvgr_tensor::derive_seed(cfg.seed, "backbone.init"));
    let model = PretrainModel::new(&mut store, cfg);
    let initial = heldout_loss(&model, &store, cfg, &heldout)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        clip_norm: Some(1.0),
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(mvgr_tensor::derive_seed(cfg.seed, "backbone.batches"));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(corpus.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&corpus[order[cursor]]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &store, cfg, &batch)?;
        let l = tape.scalar(loss);
        if !l.is_finite() {
            return Err(Error::Diverged(format!("backbone pretraining loss non-finite at step {step}")));
        }
        losses.push(l);
        let grads = tape.backward(loss);
        adam.step(&mut store, &grads.param_grads(&tape))?;
    }
    let tensors: Vec<(String, Tensor)> = model
        .backbone
        .param_ids()
        .into_iter()
        .map(|id| (store.name(id).to_string(), round_f32(store.get(id))))
        .collect();
    for (name, t) in &tensors {
        let id = store.id(name)?;
        store.set(id, t.clone())?;
    }
    let final_loss = heldout_loss(&model, &store, cfg, &heldout)?;
    Ok((
        BackboneCheckpoint {
            config: cfg.backbone,
            seed: cfg.seed,
            tensors,
            initial_heldout_loss: initial,
            final_heldout_loss: final_loss,
        },
        BackbonePretrainLog { losses },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackbonePretrainConfig {
        BackbonePretrainConfig {
            backbone: BackboneConfig {
                dim: 16,
                heads: 2,
                layers: 2,
                mlp_hidden: 32,
            },
            patch: 12,
            n_patches: 4,
            corpus_size: 32,
            heldout_size: 16,
            steps: 60,
            batch_size: 8,
            lr: 3e-3,
            seed: 9,
        }
    }

    #[test]
    fn pretraining_beats_init_and_is_deterministic() {
        let (a, log) = pretrain_backbone(&tiny()).unwrap();
        assert_eq!(log.losses.len(), 60);
        assert!(a.final_heldout_loss < a.initial_heldout_loss, "{} vs {}", a.final_heldout_loss, a.initial_heldout_loss);
        let (b, _) = pretrain_backbone(&tiny()).unwrap();
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
    }

    #[test]
    fn checkpoint_round_trip_and_freeze() {
        let (a, _) = pretrain_backbone(&BackbonePretrainConfig { steps: 3, ..tiny() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        let b = BackboneCheckpoint::load(dir.path()).unwrap();
        assert_eq!(a, b);
        let mut store = ParamStore::new(0);
        let bb = b.instantiate(&mut store).unwrap();
        assert!(bb.param_ids().iter().all(|&id| !store.is_trainable(id)));
    }

    #[test]
    fn causal_blocks_cover_prefixes() {
        let b = causal_blocks(2, 3);
        assert_eq!(b.len(), 6);
        assert_eq!(b[4], Block::new(4, 1, 3, 2));
    }
}
