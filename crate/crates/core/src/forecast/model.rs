//! The prompt-empowered forecaster.

use mvgr_tensor::layers::Linear;
use mvgr_tensor::{Block, Init, ParamId, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, LayerAdapters};
use super::data::ForecastBatch;
use super::patch::{PatchEncoder, PatchSpec};
use super::prompt::PromptPool;
use crate::error::{Error, Result};

/// Component switches for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    /// Prompt generation network; off replaces `P_r` with zeros.
    pub pgn: bool,
    /// Low-rank adapters; off runs the frozen backbone alone.
    pub lora: bool,
    /// Exogenous channels; off feeds zeros.
    pub ev: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            pgn: true,
            lora: true,
            ev: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    pub spec: PatchSpec,
    /// Patch feature width `D`.
    pub feature_dim: usize,
    pub heads: usize,
    pub patch_hidden: usize,
    pub pool_size: usize,
    pub k_p: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Windows per optimizer step, rounded up to whole origins.
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Steps between consecutive training origins.
    pub train_stride: usize,
    pub toggles: Toggles,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            spec: PatchSpec::default(),
            feature_dim: 64,
            heads: 4,
            patch_hidden: 128,
            pool_size: 64,
            k_p: 16,
            lora_rank: 4,
            lora_scale: 2.0,
            batch_size: 32,
            epochs: 30,
            lr: 1e-3,
            patience: 4,
            train_stride: 48,
            toggles: Toggles::default(),
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.feature_dim == 0 || self.heads == 0 || !self.feature_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "feature_dim {} must be a positive multiple of heads {}",
                self.feature_dim, self.heads
            )));
        }
        if self.k_p == 0 || self.k_p > self.pool_size {
            return Err(Error::Config(format!("k_p = {} must lie in 1..={}", self.k_p, self.pool_size)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.train_stride == 0 {
            return Err(Error::Config("batch_size, epochs and train_stride must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrossModal {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub dim: usize,
}

impl CrossModal {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            wq: store.add(&format!("{name}.wq"), dim, dim, Init::FanIn),
            wk: store.add(&format!("{name}.wk"), dim, dim, Init::FanIn),
            wv: store.add(&format!("{name}.wv"), dim, dim, Init::FanIn),
            dim,
        }
    }
}

/// `F = softmax((T W_Q)(U W_K)ᵀ/√d)(U W_V)`, with text rows of each group
/// attending over the `U` rows of the same group. Returns `F` and the
/// attention node.
pub fn cross_modal_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    p: &CrossModal,
    text: Var,
    u: Var,
    groups: &[(usize, usize)],
) -> Result<(Var, Var)> {
    let (nt, dt) = tape.shape(text);
    let (nu, du) = tape.shape(u);
    if dt != p.dim || du != p.dim {
        return Err(Error::Shape(format!("text width {dt} and U width {du} must both be {}", p.dim)));
    }
    if nt != nu {
        return Err(Error::Shape(format!("{nt} text rows for {nu} U rows")));
    }
    let blocks: Vec<Block> = groups.iter().map(|&(s, l)| Block::new(s, l, s, l)).collect();
    let (wq, wk, wv) = (tape.param(store, p.wq), tape.param(store, p.wk), tape.param(store, p.wv));
    let q = tape.matmul(text, wq);
    let k = tape.matmul(u, wk);
    let v = tape.matmul(u, wv);
    let f = tape.attention(q, k, v, 1, &blocks);
    Ok((f, f))
}

#[derive(Debug, Clone)]
pub struct Forecaster {
    pub spec: PatchSpec,
    pub enc_x: PatchEncoder,
    pub enc_rain: PatchEncoder,
    pub enc_holiday: PatchEncoder,
    pub enc_event: PatchEncoder,
    pub pool: PromptPool,
    pub u_proj: Linear,
    pub text_proj: Linear,
    pub cross: CrossModal,
    pub token_proj: Linear,
    pub backbone: Backbone,
    pub adapters: Option<Vec<LayerAdapters>>,
    pub head: Linear,
    /// Linear map from the horizon part of the exogenous channels straight
    /// to the output, added to `head`.
    pub covariate_head: Linear,
    pub toggles: Toggles,
    pub dim: usize,
}

pub struct ForecastVars {
    /// `n × T` normalized predictions.
    pub pred: Var,
    pub prompt_weights: Option<Var>,
    pub fusion_attention: Var,
}

impl Forecaster {
    /// Builds every trainable component around an already-instantiated frozen
    /// backbone. The output head starts at zero.
    pub fn new(store: &mut ParamStore, cfg: &ForecastConfig, backbone: Backbone, key_dim: usize, text_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let d = backbone.config.dim;
        let fd = cfg.feature_dim;
        let enc = |store: &mut ParamStore, name: &str| PatchEncoder::new(store, name, &cfg.spec, fd, cfg.heads, cfg.patch_hidden);
        let enc_x = enc(store, "enc.x");
        let enc_rain = enc(store, "enc.rain");
        let enc_holiday = enc(store, "enc.holiday");
        let enc_event = enc(store, "enc.event");
        let pool = PromptPool::new(store, "pool", cfg.pool_size, key_dim, d, cfg.k_p)?;
        let adapters = if cfg.toggles.lora {
            Some(backbone.new_adapters(store, "lora", cfg.lora_rank, cfg.lora_scale)?)
        } else {
            None
        };
        Ok(Self {
            spec: cfg.spec,
            enc_x,
            enc_rain,
            enc_holiday,
            enc_event,
            pool,
            u_proj: Linear::new(store, "u_proj", d + 4 * fd, d, true),
            text_proj: Linear::new(store, "text_proj", text_dim, d, true),
            cross: CrossModal::new(store, "cross_modal", d),
            token_proj: Linear::new(store, "token_proj", fd, d, true),
            head: Linear::zeros(store, "head", d, cfg.spec.horizon, true),
            covariate_head: Linear::zeros(store, "covariate_head", 3 * cfg.spec.horizon, cfg.spec.horizon, false),
            backbone,
            adapters,
            toggles: cfg.toggles,
            dim: d,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, batch: &ForecastBatch) -> Result<ForecastVars> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::Invalid("empty forecast batch".into()));
        }
        for (name, t) in [("x", &batch.x), ("rain", &batch.rain), ("holiday", &batch.holiday), ("event", &batch.event), ("h", &batch.h)] {
            if t.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Invalid(format!("non-finite {name} input")));
            }
        }
        let x = tape.constant(&batch.x);
        let ex = self.enc_x.forward(tape, store, x)?;
        let (rain, hol, ev) = if self.toggles.ev {
            (batch.rain.clone(), batch.holiday.clone(), batch.event.clone())
        } else {
            let z = Tensor::zeros(n, self.spec.lookback);
            (z.clone(), z.clone(), z)
        };
        let rain = tape.constant(&rain);
        let hol = tape.constant(&hol);
        let ev = tape.constant(&ev);
        let er = self.enc_rain.forward(tape, store, rain)?;
        let eh = self.enc_holiday.forward(tape, store, hol)?;
        let ee = self.enc_event.forward(tape, store, ev)?;

        let (prompts, prompt_weights) = if self.toggles.pgn {
            let h = tape.constant(&batch.h);
            let out = self.pool.retrieve(tape, store, h)?;
            (out.prompts, Some(out.weights))
        } else {
            (tape.constant(&Tensor::zeros(n, self.dim)), None)
        };
        let bundle = tape.concat_cols(&[prompts, ex.summary, er.summary, eh.summary, ee.summary]);
        let u = self.u_proj.forward(tape, store, bundle);
        let text = tape.constant(&batch.text);
        let t = self.text_proj.forward(tape, store, text);
        let (f, fusion_attention) = cross_modal_fuse(tape, store, &self.cross, t, u, &batch.groups)?;

        let np = self.spec.n_patches();
        let seq = np + 2;
        let patches = self.token_proj.forward(tape, store, ex.patch_tokens);
        let stacked = tape.concat_rows(&[patches, u, f]);
        let order: Vec<usize> = (0..n)
            .flat_map(|i| (0..np).map(move |p| i * np + p).chain([n * np + i, n * np + n + i]))
            .collect();
        let tokens = tape.gather_rows(stacked, &order);
        let out = self.backbone.forward(tape, store, tokens, seq, self.adapters.as_deref())?;
        let last: Vec<usize> = (0..n).map(|i| i * seq + seq - 1).collect();
        let last = tape.gather_rows(out, &last);
        // The last `T` steps of each exogenous window are the known horizon covariates.
        let (l, h) = (self.spec.lookback, self.spec.horizon);
        let known = [rain, hol, ev].map(|c| tape.slice_cols(c, l - h, h));
        let known = tape.concat_cols(&known);
        let base = self.head.forward(tape, store, last);
        let skip = self.covariate_head.forward(tape, store, known);
        let pred = tape.add(base, skip);
        Ok(ForecastVars {
            pred,
            prompt_weights,
            fusion_attention,
        })
    }

    /// De-normalized predictions, one row per batch sample.
    pub fn predict(&self, store: &ParamStore, batch: &ForecastBatch) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars = self.forward(&mut tape, store, batch)?;
        let p = tape.value(vars.pred);
        Ok((0..batch.len())
            .map(|i| p.row_slice(i).iter().map(|&z| batch.stats[i].denormalize(z)).collect())
            .collect())
    }
}

/// Mean absolute error on the normalized horizon.
pub fn forecast_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(pred) != (target.rows(), target.cols()) {
        return Err(Error::Shape("prediction and target shapes differ".into()));
    }
    let y = tape.constant(target);
    let d = tape.sub(pred, y);
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

