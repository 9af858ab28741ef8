//! Forecaster training with early stopping, and batched inference.

use std::path::Path;

use mvgr_tensor::{Adam, AdamConfig, ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::BackboneCheckpoint;
use super::data::ForecastData;
use super::model::{forecast_loss, ForecastConfig, Forecaster};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::eval::{effective_mask, wmape};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForecastTrainLog {
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss on a fixed training subset after each epoch.
    pub eval_losses: Vec<f64>,
    /// Validation WMAPE (effective window) after each epoch.
    pub val_wmape: Vec<f64>,
    pub best_epoch: usize,
}

pub struct TrainedForecaster {
    pub store: ParamStore,
    pub model: Forecaster,
    pub log: ForecastTrainLog,
}

/// One forecast row: region index, origin step and `T` de-normalized values.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionForecast {
    pub region: usize,
    pub origin: usize,
    pub values: Vec<f64>,
}

/// Fresh store with the frozen backbone and a newly initialized forecaster.
pub fn build_forecaster(
    data: &ForecastData,
    backbone: &BackboneCheckpoint,
    cfg: &ForecastConfig,
    seed: u64,
) -> Result<(ParamStore, Forecaster)> {
    let mut store = ParamStore::new(mvgr_tensor::derive_seed(seed, "forecaster"));
    let bb = backbone.instantiate(&mut store)?;
    let model = Forecaster::new(&mut store, cfg, bb, data.h.cols(), data.text_dim())?;
    Ok((store, model))
}

fn origins_per_batch(cfg: &ForecastConfig, n_regions: usize) -> usize {
    cfg.batch_size.div_ceil(n_regions.max(1)).max(1)
}

pub fn predict(model: &Forecaster, store: &ParamStore, data: &ForecastData, origins: &[usize], chunk: usize) -> Result<Vec<RegionForecast>> {
    let mut out = Vec::with_capacity(origins.len() * data.n_regions());
    for part in origins.chunks(chunk.max(1)) {
        let batch = data.batch(part, model.toggles.ev, false)?;
        let preds = model.predict(store, &batch)?;
        for ((region, origin), values) in batch.samples.iter().zip(preds) {
            out.push(RegionForecast {
                region: *region,
                origin: *origin,
                values,
            });
        }
    }
    Ok(out)
}

/// Pooled WMAPE of `forecasts` over the effective window.
pub fn forecast_wmape(data: &ForecastData, forecasts: &[RegionForecast]) -> Result<f64> {
    let (mut y, mut yhat, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for f in forecasts {
        let t = f.values.len();
        y.extend_from_slice(&data.series[f.region][f.origin..f.origin + t]);
        yhat.extend_from_slice(&f.values);
        mask.extend(effective_mask(data.start, f.origin..f.origin + t));
    }
    wmape(&y, &yhat, Some(&mask))
}

/// Trains on `train_origins`, early-stopping on validation WMAPE over
/// `val_origins`. Returns the parameters of the best validation epoch.
pub fn train_forecaster(
    data: &ForecastData,
    train_origins: &[usize],
    val_origins: &[usize],
    backbone: &BackboneCheckpoint,
    cfg: &ForecastConfig,
    seed: u64,
) -> Result<TrainedForecaster> {
    cfg.validate()?;
    if train_origins.is_empty() || val_origins.is_empty() {
        return Err(Error::Invalid("training needs at least one training and one validation origin".into()));
    }
    let (mut store, model) = build_forecaster(data, backbone, cfg, seed)?;
    let per_batch = origins_per_batch(cfg, data.n_regions());
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        clip_norm: Some(1.0),
        ..AdamConfig::default()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(mvgr_tensor::derive_seed(seed, "forecaster.batches"));
    let eval_origins: Vec<usize> = {
        let stride = (train_origins.len() / 8).max(1);
        train_origins.iter().step_by(stride).take(8).copied().collect()
    };
    let eval_batch = data.batch(&eval_origins, model.toggles.ev, true)?;
    let mut log = ForecastTrainLog::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut order = train_origins.to_vec();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in order.chunks(per_batch) {
            let batch = data.batch(chunk, model.toggles.ev, true)?;
            let mut tape = Tape::new();
            let vars = model.forward(&mut tape, &store, &batch)?;
            let loss = forecast_loss(&mut tape, vars.pred, batch.target.as_ref().expect("targets requested"))?;
            let l = tape.scalar(loss);
            if !l.is_finite() {
                return Err(Error::Diverged(format!("forecast loss non-finite in epoch {epoch}")));
            }
            total += l * batch.len() as f64;
            count += batch.len();
            let grads = tape.backward(loss);
            adam.step(&mut store, &grads.param_grads(&tape))?;
        }
        log.epoch_losses.push(total / count as f64);
        let mut tape = Tape::new();
        let vars = model.forward(&mut tape, &store, &eval_batch)?;
        let l = forecast_loss(&mut tape, vars.pred, eval_batch.target.as_ref().expect("targets requested"))?;
        log.eval_losses.push(tape.scalar(l));
        let val = forecast_wmape(data, &predict(&model, &store, data, val_origins, per_batch)?)?;
        log.val_wmape.push(val);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, store.clone()));
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                break;
            }
        }
    }
    let (_, store) = best.expect("at least one epoch ran");
    Ok(TrainedForecaster { store, model, log })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ForecasterMeta {
    kind: String,
    config: ForecastConfig,
    seed: u64,
    backbone_hash: String,
    log: ForecastTrainLog,
}

/// Writes every non-backbone parameter of a trained forecaster. The backbone
/// is referenced by content hash and must be supplied again on load.
pub fn save_forecaster(dir: &Path, trained: &TrainedForecaster, cfg: &ForecastConfig, seed: u64, backbone: &BackboneCheckpoint) -> Result<()> {
    let tensors: Vec<(String, mvgr_tensor::Tensor)> = checkpoint::store_tensors(&trained.store)
        .into_iter()
        .filter(|(n, _)| !n.starts_with("backbone."))
        .collect();
    let meta = serde_json::to_value(ForecasterMeta {
        kind: "forecaster".into(),
        config: cfg.clone(),
        seed,
        backbone_hash: backbone.content_hash()?,
        log: trained.log.clone(),
    })?;
    checkpoint::save_tensors(dir, meta, &tensors)?;
    Ok(())
}

pub fn load_forecaster(dir: &Path, data: &ForecastData, backbone: &BackboneCheckpoint) -> Result<(TrainedForecaster, ForecastConfig)> {
    let (m, tensors) = checkpoint::load_tensors(dir)?;
    let meta: ForecasterMeta = serde_json::from_value(m.meta)?;
    if meta.kind != "forecaster" {
        return Err(Error::Integrity(format!("{}: not a forecaster checkpoint", dir.display())));
    }
    if meta.backbone_hash != backbone.content_hash()? {
        return Err(Error::Integrity(format!("{}: trained against a different backbone", dir.display())));
    }
    let (mut store, model) = build_forecaster(data, backbone, &meta.config, meta.seed)?;
    checkpoint::restore_into(&mut store, &tensors)?;
    Ok((
        TrainedForecaster {
            store,
            model,
            log: meta.log,
        },
        meta.config,
    ))
}
