use std::path::Path;

use mvgr_tensor::layers::Linear;
use mvgr_tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{UpliftData, UpliftSample};
use super::treatment::TreatmentSet;
use crate::checkpoint;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpliftTrainConfig {
    pub seed: u64,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for UpliftTrainConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            hidden: 32,
            epochs: 30,
            batch_size: 128,
            lr: 3e-3,
        }
    }
}

impl UpliftTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("hidden, epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpliftTrainLog {
    pub epoch_losses: Vec<f64>,
    /// Cross-entropy on the whole training set, before training and after each epoch.
    pub eval_losses: Vec<f64>,
}

/// Shared two-layer trunk with one sigmoid head per treatment. Inputs are
/// standardized with the training-set moments.
#[derive(Debug, Clone)]
pub struct MultiHeadModel {
    pub treatments: TreatmentSet,
    pub config: UpliftTrainConfig,
    pub input_dim: usize,
    pub embedding_dim: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub store: ParamStore,
    pub trunk: [Linear; 2],
    pub heads: Vec<Linear>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    treatments: TreatmentSet,
    config: UpliftTrainConfig,
    input_dim: usize,
    embedding_dim: usize,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl MultiHeadModel {
    fn build(treatments: TreatmentSet, config: UpliftTrainConfig, input_dim: usize, embedding_dim: usize, mean: Vec<f64>, scale: Vec<f64>) -> Self {
        let mut store = ParamStore::new(mvgr_tensor::derive_seed(config.seed, "uplift.model"));
        let h = config.hidden;
        let trunk = [
            Linear::new(&mut store, "trunk.l1", input_dim, h, true),
            Linear::new(&mut store, "trunk.l2", h, h, true),
        ];
        let heads = (0..treatments.len()).map(|i| Linear::new(&mut store, &format!("head{i}"), h, 1, true)).collect();
        Self {
            treatments,
            config,
            input_dim,
            embedding_dim,
            mean,
            scale,
            store,
            trunk,
            heads,
        }
    }

    fn standardized(&self, rows: &[&[f64]]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * self.input_dim);
        for r in rows {
            if r.len() != self.input_dim {
                return Err(Error::Shape(format!("{} features, model expects {}", r.len(), self.input_dim)));
            }
            data.extend(r.iter().zip(self.mean.iter().zip(&self.scale)).map(|(v, (m, s))| (v - m) / s));
        }
        Ok(Tensor::matrix(rows.len(), self.input_dim, data))
    }

    /// `n × N_st` head logits.
    pub fn logits(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        for l in &self.trunk {
            h = l.forward(tape, &self.store, h);
            h = tape.gelu(h);
        }
        let outs: Vec<Var> = self.heads.iter().map(|l| l.forward(tape, &self.store, h)).collect();
        tape.concat_cols(&outs)
    }

    /// Mean cross-entropy of each sample's observed-treatment head. The other
    /// heads are multiplied by a zero mask, so they receive no gradient.
    pub fn batch_loss(&self, tape: &mut Tape, samples: &[&UpliftSample]) -> Result<Var> {
        if samples.is_empty() {
            return Err(Error::Invalid("empty uplift batch".into()));
        }
        let nt = self.treatments.len();
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.features.as_slice()).collect();
        let x = self.standardized(&rows)?;
        let mut mask = Tensor::zeros(samples.len(), nt);
        let mut y = Tensor::zeros(samples.len(), nt);
        for (i, s) in samples.iter().enumerate() {
            if s.treatment >= nt {
                return Err(Error::Invalid(format!("sample {} has treatment index {}", s.sample_id, s.treatment)));
            }
            mask.set(i, s.treatment, 1.0);
            y.set(i, s.treatment, f64::from(u8::from(s.converted)));
        }
        let x = tape.constant(&x);
        let z = self.logits(tape, x);
        // softplus(z) - y z is the cross-entropy of sigmoid(z) against y.
        let sp = tape.softplus(z);
        let y = tape.constant(&y);
        let yz = tape.mul(y, z);
        let ce = tape.sub(sp, yz);
        let mask = tape.constant(&mask);
        let masked = tape.mul(ce, mask);
        let total = tape.sum(masked);
        Ok(tape.scale(total, 1.0 / samples.len() as f64))
    }

    fn dataset_loss(&self, samples: &[UpliftSample]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in samples.chunks(1024) {
            let refs: Vec<&UpliftSample> = chunk.iter().collect();
            let mut tape = Tape::new();
            let l = self.batch_loss(&mut tape, &refs)?;
            total += tape.scalar(l) * chunk.len() as f64;
        }
        Ok(total / samples.len() as f64)
    }

    /// Conversion probability of every head, one row per input.
    pub fn predict(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(features.len());
        for chunk in features.chunks(1024) {
            let rows: Vec<&[f64]> = chunk.iter().map(|r| r.as_slice()).collect();
            let x = self.standardized(&rows)?;
            let mut tape = Tape::new();
            let x = tape.constant(&x);
            let z = self.logits(&mut tape, x);
            let p = tape.sigmoid(z);
            out.extend(tape.value(p).row_vecs());
        }
        Ok(out)
    }

    /// `Ŷ(t|x) − Ŷ(control|x)` for each input.
    pub fn uplift(&self, features: &[Vec<f64>], treatment: &str) -> Result<Vec<f64>> {
        let t = self.treatments.index(treatment)?;
        Ok(self.predict(features)?.into_iter().map(|p| p[t] - p[0]).collect())
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::to_value(ModelMeta {
            kind: "uplift".into(),
            treatments: self.treatments.clone(),
            config: self.config.clone(),
            input_dim: self.input_dim,
            embedding_dim: self.embedding_dim,
            mean: self.mean.clone(),
            scale: self.scale.clone(),
        })
        .expect("metadata serializes")
    }

    pub fn save(&self, dir: &Path) -> Result<checkpoint::Manifest> {
        checkpoint::save_tensors(dir, self.meta(), &checkpoint::store_tensors(&self.store))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, tensors) = checkpoint::load_tensors(dir)?;
        let meta: ModelMeta = serde_json::from_value(m.meta)?;
        if meta.kind != "uplift" {
            return Err(Error::Integrity(format!("{}: not an uplift model", dir.display())));
        }
        let mut model = Self::build(meta.treatments, meta.config, meta.input_dim, meta.embedding_dim, meta.mean, meta.scale);
        if tensors.len() != model.store.len() {
            return Err(Error::Integrity(format!("{}: {} tensors, model has {}", dir.display(), tensors.len(), model.store.len())));
        }
        checkpoint::restore_into(&mut model.store, &tensors)?;
        Ok(model)
    }
}

fn moments(data: &UpliftData) -> (Vec<f64>, Vec<f64>) {
    let d = data.feature_dim();
    let n = data.samples.len() as f64;
    let mut mean = vec![0.0; d];
    for s in &data.samples {
        for (m, v) in mean.iter_mut().zip(&s.features) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; d];
    for s in &data.samples {
        for ((q, v), m) in var.iter_mut().zip(&s.features).zip(&mean) {
            *q += (v - m).powi(2) / n;
        }
    }
    let scale = var.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

/// Minibatch Adam on the observed-head cross-entropy.
pub fn train_uplift(data: &UpliftData, cfg: &UpliftTrainConfig) -> Result<(MultiHeadModel, UpliftTrainLog)> {
    cfg.validate()?;
    data.validate()?;
    if data.samples.is_empty() {
        return Err(Error::Invalid("no uplift samples".into()));
    }
    let mut seen = vec![false; data.treatments.len()];
    for s in &data.samples {
        seen[s.treatment] = true;
    }
    if let Some(t) = seen.iter().position(|s| !s) {
        return Err(Error::Invalid(format!("treatment {:?} is never observed", data.treatments.name(t))));
    }
    let (mean, scale) = moments(data);
    let mut model = MultiHeadModel::build(data.treatments.clone(), cfg.clone(), data.feature_dim(), data.embedding_dim, mean, scale);
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        clip_norm: Some(5.0),
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(mvgr_tensor::derive_seed(cfg.seed, "uplift.batches"));
    let mut log = UpliftTrainLog::default();
    log.eval_losses.push(model.dataset_loss(&data.samples)?);
    let mut order: Vec<usize> = (0..data.samples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&UpliftSample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let mut tape = Tape::new();
            let loss = model.batch_loss(&mut tape, &batch)?;
            let l = tape.scalar(loss);
            if !l.is_finite() {
                return Err(Error::Diverged(format!("uplift loss non-finite in epoch {epoch}")));
            }
            total += l * batch.len() as f64;
            count += batch.len();
            let grads = tape.backward(loss);
            adam.step(&mut model.store, &grads.param_grads(&tape))?;
        }
        log.epoch_losses.push(total / count as f64);
        log.eval_losses.push(model.dataset_loss(&data.samples)?);
    }
    Ok((model, log))
}
