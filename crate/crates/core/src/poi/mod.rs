//! Semantic attribute view: POI category encoders, text features and the
//! grid-level pooled representation.

mod encoder;
mod grid;
mod knn;
mod text;
mod walks;

pub use encoder::{
    cooccurrence_loss, group_regularizer, hierarchical_loss, proximity_counts, spatial_proximity_loss, walk_counts,
    CategoryEncoder,
};
pub use grid::{poi_features, poi_features_from, PoiFeatures, SemanticOutput, SemanticPooling};
pub use knn::{all_knn, knn_neighbors};
pub use text::{category_text_features, describe_category, tokenize, HashedEmbedder, TextEmbedder, DEFAULT_TEXT_DIM};
pub use walks::{build_poi_graph, sample_random_walks, PoiGraph, WalkSet};

use mvgr_tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{CategoryVocab, City};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoiConfig {
    pub knn_k: usize,
    pub walk_length: usize,
    pub walks_per_node: usize,
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for PoiConfig {
    fn default() -> Self {
        Self {
            knn_k: 10,
            walk_length: 8,
            walks_per_node: 4,
            lambda: 0.1,
            steps: 200,
            lr: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PoiTrainLog {
    /// Mean per-pair losses.
    pub sp: Vec<f64>,
    pub hcs: Vec<f64>,
    pub isolated_pois: usize,
}

/// Precomputed pair statistics for both POI objectives over a whole city.
#[derive(Debug, Clone)]
pub struct PoiObjective {
    pub sp_counts: Tensor,
    pub sp_pairs: f64,
    pub hcs_counts: Tensor,
    pub hcs_targets: Vec<f64>,
    pub hcs_pairs: f64,
    pub isolated_pois: usize,
    pub lambda: f64,
}

impl PoiObjective {
    pub fn build(city: &City, fs: &CategoryEncoder, fh: &CategoryEncoder, config: &PoiConfig, seed: u64) -> Result<Self> {
        let points: Vec<(f64, f64)> = city.pois.iter().map(|p| (p.x, p.y)).collect();
        if points.len() < 2 {
            return Err(Error::Invalid("POI encoders need at least two POIs".into()));
        }
        let k = config.knn_k.min(points.len() - 1);
        let neighbors = all_knn(&points, k)?;
        let primary: Vec<usize> = city.pois.iter().map(|p| p.primary).collect();
        let secondary: Vec<usize> = city.pois.iter().map(|p| p.secondary).collect();
        let centers: Vec<usize> = (0..points.len()).collect();
        let sp_counts = proximity_counts(&primary, fs.n_categories, &centers, &neighbors)?;
        let graph = build_poi_graph(&points, k, None)?;
        let walks = sample_random_walks(&graph, config.walk_length, config.walks_per_node, mvgr_tensor::derive_seed(seed, "poi.walks"))?;
        let (hcs_counts, hcs_targets) = walk_counts(&secondary, fh.n_categories, &walks.sequences)?;
        Ok(Self {
            sp_pairs: sp_counts.sum(),
            hcs_pairs: hcs_counts.sum().max(1.0),
            sp_counts,
            hcs_counts,
            hcs_targets,
            isolated_pois: walks.isolated.len(),
            lambda: config.lambda,
        })
    }

    /// Per-pair spatial-proximity and hierarchical losses.
    pub fn losses(&self, tape: &mut Tape, store: &ParamStore, fs: &CategoryEncoder, fh: &CategoryEncoder, vocab: &CategoryVocab) -> (Var, Var) {
        let es = fs.encode_all(tape, store);
        let sp = cooccurrence_loss(tape, es, &self.sp_counts);
        let sp = tape.scale(sp, 1.0 / self.sp_pairs);
        let eh = fh.encode_all(tape, store);
        let sg = cooccurrence_loss(tape, eh, &self.hcs_counts);
        let reg = group_regularizer(tape, eh, vocab, &self.hcs_targets, self.lambda);
        let hcs = tape.add(sg, reg);
        let hcs = tape.scale(hcs, 1.0 / self.hcs_pairs);
        (sp, hcs)
    }
}

/// Trains `fs` with the spatial-proximity loss and `fh` with the hierarchical
/// loss on the whole city.
pub fn train_poi_encoders(
    store: &mut ParamStore,
    fs: &CategoryEncoder,
    fh: &CategoryEncoder,
    city: &City,
    config: &PoiConfig,
    seed: u64,
) -> Result<PoiTrainLog> {
    let objective = PoiObjective::build(city, fs, fh, config, seed)?;
    let mut log = PoiTrainLog {
        isolated_pois: objective.isolated_pois,
        ..PoiTrainLog::default()
    };
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    })?;
    for step in 0..config.steps {
        let mut tape = Tape::new();
        let (sp, hcs) = objective.losses(&mut tape, store, fs, fh, &city.vocab);
        let total = tape.add(sp, hcs);
        let (lsp, lhcs) = (tape.scalar(sp), tape.scalar(hcs));
        if !lsp.is_finite() || !lhcs.is_finite() {
            return Err(Error::Diverged(format!("POI encoder loss non-finite at step {step}: sp={lsp} hcs={lhcs}")));
        }
        log.sp.push(lsp);
        log.hcs.push(lhcs);
        let grads = tape.backward(total);
        adam.step(store, &grads.param_grads(&tape))?;
    }
    Ok(log)
}
