//! Stage-1 cross-view fusion, contrastive objectives and pretraining.

mod losses;
mod model;

pub use losses::{cosine, holistic_batch, info_nce, info_nce_batch, same_row_batch, NceBatch};
pub use model::{
    dual_cross_attention, fuse_views, pool_to_county, CrossAttention, CrossOutput, Stage1Inputs, Stage1Model,
    Stage1Vars,
};

use std::ops::Range;

use mvgr_tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mobility::{aggregate_profiles, profile_matrix};
use crate::poi::{poi_features, train_poi_encoders, PoiConfig, PoiObjective, PoiTrainLog, TextEmbedder};
use crate::synth::{City, SeriesPanel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// POI encoders first, then frozen while the fusion stack trains.
    Sequential,
    /// All objectives in one loop.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub dim: usize,
    pub heads: usize,
    pub mobility_hidden: usize,
    pub tau: f64,
    pub n_negatives: usize,
    /// Anchor regions per step; the batch also supplies the negatives.
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_mvc_p: f64,
    pub weight_mvc_m: f64,
    pub weight_hp: f64,
    pub schedule: Schedule,
    /// Emit embeddings every this many steps (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
    pub poi: PoiConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            mobility_hidden: 128,
            tau: 0.1,
            n_negatives: 16,
            batch_size: 128,
            steps: 150,
            lr: 3e-3,
            weight_mvc_p: 1.0,
            weight_mvc_m: 1.0,
            weight_hp: 1.0,
            schedule: Schedule::Sequential,
            checkpoint_every: 0,
            poi: PoiConfig::default(),
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.n_negatives == 0 {
            return Err(Error::Config("n_negatives must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        Ok(())
    }
}

/// Grid- and county-level outputs of Stage 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Embeddings {
    pub z_p: Tensor,
    pub z_m: Tensor,
    pub z_f: Tensor,
    pub h: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Losses {
    pub step: usize,
    pub mvc_p: f64,
    pub mvc_m: f64,
    pub hp: f64,
    pub total: f64,
}

pub struct Stage1Result {
    pub store: ParamStore,
    pub model: Stage1Model,
    pub embeddings: Stage1Embeddings,
    pub poi_log: PoiTrainLog,
    pub losses: Vec<Stage1Losses>,
}

/// Stage-1 inputs from a city and its grid activity, with mobility profiles
/// restricted to `profile_range`.
pub fn build_stage1_inputs(
    city: &City,
    grid_activity: &SeriesPanel,
    profile_range: Range<usize>,
    embedder: &dyn TextEmbedder,
) -> Result<Stage1Inputs> {
    if grid_activity.n_regions() != city.n_grids() {
        return Err(Error::Shape(format!(
            "grid activity covers {} regions but the city has {} grids",
            grid_activity.n_regions(),
            city.n_grids()
        )));
    }
    let profiles = grid_activity
        .call
        .iter()
        .map(|s| aggregate_profiles(s, grid_activity.start, profile_range.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Stage1Inputs {
        poi: poi_features(city, embedder)?,
        profiles: profile_matrix(&profiles),
        members: city.counties.iter().map(|c| c.grids.clone()).collect(),
    })
}

pub struct LossVars {
    pub mvc_p: Var,
    pub mvc_m: Var,
    pub hp: Var,
    pub total: Var,
}

/// Weighted Stage-1 objective for one step. Negatives are resampled from `rng`.
pub fn stage1_losses(
    tape: &mut Tape,
    vars: &Stage1Vars,
    inputs: &Stage1Inputs,
    config: &Stage1Config,
    rng: &mut ChaCha8Rng,
) -> Result<LossVars> {
    let n = inputs.n_grids();
    let bsz = config.batch_size.min(n);
    let mut batch: Vec<usize> = if bsz == n { (0..n).collect() } else { sample(rng, n, bsz).into_vec() };
    batch.sort_unstable();
    let mvc = same_row_batch(&batch, config.n_negatives, rng)?;
    let mvc_p = info_nce_batch(tape, vars.z_f, vars.z_p, &mvc, config.tau)?;
    let mvc_m = info_nce_batch(tape, vars.z_f, vars.z_m, &mvc, config.tau)?;
    let hpb = holistic_batch(&inputs.members, n, config.n_negatives, rng)?;
    let hp = info_nce_batch(tape, vars.h, vars.z_f, &hpb, config.tau)?;
    let a = tape.scale(mvc_p, config.weight_mvc_p);
    let b = tape.scale(mvc_m, config.weight_mvc_m);
    let c = tape.scale(hp, config.weight_hp);
    let ab = tape.add(a, b);
    let total = tape.add(ab, c);
    Ok(LossVars { mvc_p, mvc_m, hp, total })
}

fn embeddings(tape: &Tape, vars: &Stage1Vars) -> Stage1Embeddings {
    Stage1Embeddings {
        z_p: tape.value(vars.z_p).clone(),
        z_m: tape.value(vars.z_m).clone(),
        z_f: tape.value(vars.z_f).clone(),
        h: tape.value(vars.h).clone(),
    }
}

/// Runs Stage 1. `on_checkpoint` receives the embeddings every
/// `checkpoint_every` steps and once more at the end.
pub fn pretrain(
    city: &City,
    inputs: &Stage1Inputs,
    config: &Stage1Config,
    seed: u64,
    on_checkpoint: &mut dyn FnMut(usize, &Stage1Embeddings) -> Result<()>,
) -> Result<Stage1Result> {
    config.validate()?;
    let mut store = ParamStore::new(mvgr_tensor::derive_seed(seed, "stage1"));
    let model = Stage1Model::new(
        &mut store,
        city.vocab.n_primary(),
        city.vocab.n_secondary(),
        inputs.poi.text.cols(),
        config.dim,
        config.heads,
        config.mobility_hidden,
    );
    let mut poi_log = PoiTrainLog::default();
    let joint_objective = match config.schedule {
        Schedule::Sequential => {
            poi_log = train_poi_encoders(&mut store, &model.fs, &model.fh, city, &config.poi, seed)?;
            model.fs.freeze(&mut store);
            model.fh.freeze(&mut store);
            None
        }
        Schedule::Joint => Some(PoiObjective::build(city, &model.fs, &model.fh, &config.poi, seed)?),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(mvgr_tensor::derive_seed(seed, "stage1.negatives"));
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        clip_norm: Some(5.0),
        ..AdamConfig::default()
    })?;
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut tape = Tape::new();
        let vars = model.forward(&mut tape, &store, inputs)?;
        let lv = stage1_losses(&mut tape, &vars, inputs, config, &mut rng)?;
        let mut total = lv.total;
        if let Some(obj) = &joint_objective {
            let (sp, hcs) = obj.losses(&mut tape, &store, &model.fs, &model.fh, &city.vocab);
            poi_log.sp.push(tape.scalar(sp));
            poi_log.hcs.push(tape.scalar(hcs));
            let extra = tape.add(sp, hcs);
            total = tape.add(total, extra);
        }
        let rec = Stage1Losses {
            step,
            mvc_p: tape.scalar(lv.mvc_p),
            mvc_m: tape.scalar(lv.mvc_m),
            hp: tape.scalar(lv.hp),
            total: tape.scalar(total),
        };
        if !rec.total.is_finite() {
            return Err(Error::Diverged(format!(
                "stage-1 loss non-finite at step {step} (mvc_p={}, mvc_m={}, hp={})",
                rec.mvc_p, rec.mvc_m, rec.hp
            )));
        }
        losses.push(rec);
        if config.checkpoint_every > 0 && step > 0 && step % config.checkpoint_every == 0 {
            on_checkpoint(step, &embeddings(&tape, &vars))?;
        }
        let grads = tape.backward(total);
        adam.step(&mut store, &grads.param_grads(&tape))?;
    }
    let mut tape = Tape::new();
    let vars = model.forward(&mut tape, &store, inputs)?;
    let embeddings = embeddings(&tape, &vars);
    on_checkpoint(config.steps, &embeddings)?;
    Ok(Stage1Result {
        store,
        model,
        embeddings,
        poi_log,
        losses,
    })
}
