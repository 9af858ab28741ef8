//! End-to-end experiment: data, Stage-1 pretraining, backbone pretraining,
//! forecaster variants and baselines on a rolling-origin test range.

use std::fs;
use std::path::Path;
use std::time::Instant;

use mvgr_tensor::Tensor;

use serde::{Deserialize, Serialize};

use super::baselines::{weekly_counterpart, LinearBaseline, LinearConfig};
use super::report::{PredictionRow, Report, RunSummary};
use super::split::{origins, SplitSpec, Splits};
use crate::checkpoint::{load_tensors, save_tensors, sha256_hex};
use crate::error::{io_err, Error, Result};
use crate::forecast::{
    predict, pretrain_backbone, train_forecaster, BackboneCheckpoint, BackboneConfig, BackbonePretrainConfig, ForecastConfig,
    ForecastData, PatchSpec, Toggles, TrainedForecaster,
};
use crate::fusion::{build_stage1_inputs, pretrain, Stage1Config, Stage1Embeddings, Stage1Losses};
use crate::poi::{HashedEmbedder, PoiConfig};
use crate::synth::{
    generate_city, generate_grid_activity, generate_panel, read_city, read_grid_activity_csv, read_panel_csv, write_city,
    write_grid_activity_csv, write_panel_csv, Archetype, ArchetypeCount, City, CityConfig, ExogenousPanel, Indicator, PanelConfig,
    SeriesPanel, STEPS_PER_DAY,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Replaces the seed fields of `city`, `panel` and `backbone`.
    pub seed: u64,
    pub city: CityConfig,
    pub panel: PanelConfig,
    pub split: SplitSpec,
    pub stage1: Stage1Config,
    pub backbone: BackbonePretrainConfig,
    pub forecast: ForecastConfig,
    pub linear: LinearConfig,
    pub indicators: Vec<Indicator>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            city: CityConfig::default(),
            panel: PanelConfig::default(),
            split: SplitSpec::default(),
            stage1: Stage1Config::default(),
            backbone: BackbonePretrainConfig::default(),
            forecast: ForecastConfig::default(),
            linear: LinearConfig::default(),
            indicators: Indicator::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    /// A configuration small enough to run end to end in seconds: 4 counties,
    /// 4 weeks split 2/1/1, two-day lookback.
    pub fn tiny() -> Self {
        Self {
            seed: 7,
            city: CityConfig {
                hex_radius: 2,
                archetype_mix: Archetype::ALL
                    .into_iter()
                    .map(|archetype| ArchetypeCount { archetype, counties: 1 })
                    .collect(),
                pois_per_grid: 6.0,
                ..CityConfig::default()
            },
            panel: PanelConfig {
                weeks: 4,
                ..PanelConfig::default()
            },
            split: SplitSpec {
                train_weeks: 2,
                val_weeks: 1,
                test_weeks: 1,
            },
            stage1: Stage1Config {
                dim: 8,
                heads: 2,
                mobility_hidden: 16,
                n_negatives: 4,
                steps: 10,
                poi: PoiConfig {
                    steps: 10,
                    ..PoiConfig::default()
                },
                ..Stage1Config::default()
            },
            backbone: BackbonePretrainConfig {
                backbone: BackboneConfig {
                    dim: 16,
                    heads: 2,
                    layers: 2,
                    mlp_hidden: 32,
                },
                patch: 24,
                n_patches: 4,
                corpus_size: 32,
                heldout_size: 8,
                steps: 20,
                batch_size: 8,
                lr: 3e-3,
                ..BackbonePretrainConfig::default()
            },
            forecast: ForecastConfig {
                spec: PatchSpec {
                    lookback: 96,
                    horizon: 48,
                    patch: 24,
                },
                feature_dim: 16,
                heads: 2,
                patch_hidden: 32,
                pool_size: 8,
                k_p: 4,
                lora_rank: 2,
                batch_size: 8,
                epochs: 3,
                ..ForecastConfig::default()
            },
            linear: LinearConfig::default(),
            indicators: Indicator::ALL.to_vec(),
        }
    }

    /// Copy with the experiment seed pushed into the nested configs.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.city.seed = self.seed;
        c.panel.seed = self.seed;
        c.backbone.seed = self.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.city.validate()?;
        self.panel.validate()?;
        self.stage1.validate()?;
        self.forecast.validate()?;
        self.split.ranges(self.panel.steps())?;
        if self.indicators.is_empty() {
            return Err(Error::Config("no indicators selected".into()));
        }
        Ok(())
    }

    /// SHA-256 of the seeded config in canonical JSON.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(&self.seeded())?.as_bytes()))
    }
}

/// The raw inputs of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub city: City,
    pub panel: SeriesPanel,
    pub exo: ExogenousPanel,
    /// Grid-level Call activity behind the mobility profiles.
    pub activity: SeriesPanel,
}

impl Dataset {
    pub fn generate(cfg: &ExperimentConfig) -> Result<Self> {
        let cfg = cfg.seeded();
        let city = generate_city(&cfg.city)?;
        let (panel, exo) = generate_panel(&city, &cfg.panel)?;
        let activity = generate_grid_activity(&city, &cfg.panel)?;
        Ok(Self {
            city,
            panel,
            exo,
            activity,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.city.validate()?;
        self.panel.validate()?;
        self.exo.validate(&self.panel)?;
        self.activity.validate()?;
        if self.panel.n_regions() != self.city.n_counties() {
            return Err(Error::Shape(format!(
                "panel has {} regions for {} counties",
                self.panel.n_regions(),
                self.city.n_counties()
            )));
        }
        if self.activity.steps() != self.panel.steps() {
            return Err(Error::Shape("grid activity and region panel differ in length".into()));
        }
        Ok(())
    }
}

pub const CITY_DIR: &str = "city";
pub const PANEL_CSV: &str = "panel.csv";
pub const ACTIVITY_CSV: &str = "grid_activity.csv";
pub const STAGE1_DIR: &str = "stage1";
pub const BACKBONE_DIR: &str = "backbone";

impl Dataset {
    /// Writes `city/`, `panel.csv` and `grid_activity.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_city(&self.city, &dir.join(CITY_DIR))?;
        write_panel_csv(&self.panel, &self.exo, &dir.join(PANEL_CSV))?;
        write_grid_activity_csv(&self.activity, &dir.join(ACTIVITY_CSV))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        for part in [CITY_DIR, PANEL_CSV, ACTIVITY_CSV] {
            if !dir.join(part).exists() {
                return Err(Error::MissingArtifact(format!("{} not found", dir.join(part).display())));
            }
        }
        let city = read_city(&dir.join(CITY_DIR))?;
        let (panel, exo) = read_panel_csv(&dir.join(PANEL_CSV))?;
        let activity = read_grid_activity_csv(&dir.join(ACTIVITY_CSV))?;
        let data = Self {
            city,
            panel,
            exo,
            activity,
        };
        data.validate()?;
        Ok(data)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Stage1Meta {
    kind: String,
    losses: Vec<Stage1Losses>,
}

/// Stage-1 embeddings and the frozen backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub embeddings: Stage1Embeddings,
    pub stage1_losses: Vec<Stage1Losses>,
    pub backbone: BackboneCheckpoint,
}

impl Pretrained {
    /// Writes `stage1/` and `backbone/` checkpoints into `dir`. Embeddings are
    /// stored as binary32.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let e = &self.embeddings;
        let tensors: Vec<(String, Tensor)> = [("z_p", &e.z_p), ("z_m", &e.z_m), ("z_f", &e.z_f), ("h", &e.h)]
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let meta = serde_json::to_value(Stage1Meta {
            kind: "stage1".into(),
            losses: self.stage1_losses.clone(),
        })?;
        save_tensors(&dir.join(STAGE1_DIR), meta, &tensors)?;
        self.backbone.save(&dir.join(BACKBONE_DIR))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (m, tensors) = load_tensors(&dir.join(STAGE1_DIR))?;
        let meta: Stage1Meta = serde_json::from_value(m.meta)?;
        if meta.kind != "stage1" {
            return Err(Error::Integrity(format!("{}: not a stage-1 checkpoint", dir.display())));
        }
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Integrity(format!("stage-1 checkpoint lacks `{name}`")))
        };
        Ok(Self {
            embeddings: Stage1Embeddings {
                z_p: get("z_p")?,
                z_m: get("z_m")?,
                z_f: get("z_f")?,
                h: get("h")?,
            },
            stage1_losses: meta.losses,
            backbone: BackboneCheckpoint::load(&dir.join(BACKBONE_DIR))?,
        })
    }
}

pub fn pretrain_stage1(data: &Dataset, cfg: &ExperimentConfig) -> Result<(Stage1Embeddings, Vec<Stage1Losses>)> {
    let cfg = cfg.seeded();
    let splits = cfg.split.ranges(data.panel.steps())?;
    let inputs = build_stage1_inputs(&data.city, &data.activity, splits.train, &HashedEmbedder::default())?;
    let result = pretrain(&data.city, &inputs, &cfg.stage1, cfg.seed, &mut |_, _| Ok(()))?;
    Ok((result.embeddings, result.losses))
}

pub fn pretrain_all(data: &Dataset, cfg: &ExperimentConfig) -> Result<Pretrained> {
    let (embeddings, stage1_losses) = pretrain_stage1(data, cfg)?;
    let (backbone, _) = pretrain_backbone(&cfg.seeded().backbone)?;
    Ok(Pretrained {
        embeddings,
        stage1_losses,
        backbone,
    })
}

/// A named set of component toggles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub toggles: Toggles,
}

impl Variant {
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            toggles: Toggles::default(),
        }
    }

    /// Full model followed by one variant per switched-off component.
    pub fn ablations() -> Vec<Self> {
        let off = |name: &str, f: fn(&mut Toggles)| {
            let mut toggles = Toggles::default();
            f(&mut toggles);
            Variant { name: name.into(), toggles }
        };
        vec![
            Self::full(),
            off("pgn_off", |t| t.pgn = false),
            off("lora_off", |t| t.lora = false),
            off("ev_off", |t| t.ev = false),
        ]
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::ablations()
            .into_iter()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::Config(format!("unknown variant {name:?}; expected full, pgn_off, lora_off or ev_off")))
    }
}

pub const WEEKLY_COUNTERPART: &str = "weekly_counterpart";
pub const LINEAR: &str = "linear";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub report: Report,
    pub predictions: Vec<PredictionRow>,
    pub splits: Splits,
}

/// Test origins: every midnight in the test range with a full horizon ahead.
pub fn test_origins(splits: &Splits, cfg: &ForecastConfig) -> Vec<usize> {
    origins(splits.test.clone(), cfg.spec.lookback, cfg.spec.horizon, STEPS_PER_DAY)
}

/// Forecast origins of each split: training at the configured stride,
/// validation and test daily.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitOrigins {
    pub splits: Splits,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_origins(data: &Dataset, cfg: &ExperimentConfig) -> Result<SplitOrigins> {
    let splits = cfg.split.ranges(data.panel.steps())?;
    let (l, t) = (cfg.forecast.spec.lookback, cfg.forecast.spec.horizon);
    let train = origins(splits.train.clone(), l, t, cfg.forecast.train_stride);
    let val = origins(splits.val.clone(), l, t, STEPS_PER_DAY);
    let test = test_origins(&splits, &cfg.forecast);
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Config(format!(
            "split leaves {} training, {} validation and {} test origins",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    Ok(SplitOrigins { splits, train, val, test })
}

/// Trains one variant for one indicator with the experiment seed.
pub fn train_variant(
    data: &Dataset,
    pre: &Pretrained,
    cfg: &ExperimentConfig,
    indicator: Indicator,
    variant: &Variant,
) -> Result<(ForecastData, TrainedForecaster, ForecastConfig)> {
    let cfg = cfg.seeded();
    let o = split_origins(data, &cfg)?;
    let fd = ForecastData::new(&data.panel, &data.exo, indicator, pre.embeddings.h.clone(), cfg.forecast.spec)?;
    let fcfg = ForecastConfig {
        toggles: variant.toggles,
        ..cfg.forecast.clone()
    };
    let trained = train_forecaster(&fd, &o.train, &o.val, &pre.backbone, &fcfg, cfg.seed)?;
    Ok((fd, trained, fcfg))
}

pub fn run_experiment(data: &Dataset, pre: &Pretrained, cfg: &ExperimentConfig, variants: &[Variant]) -> Result<ExperimentOutput> {
    let clock = Instant::now();
    let cfg = cfg.seeded();
    cfg.validate()?;
    data.validate()?;
    if variants.is_empty() {
        return Err(Error::Config("no model variants requested".into()));
    }
    let SplitOrigins {
        splits,
        train: train_o,
        val: val_o,
        test: test_o,
    } = split_origins(data, &cfg)?;
    let (l, t) = (cfg.forecast.spec.lookback, cfg.forecast.spec.horizon);
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &indicator in &cfg.indicators {
        let series = data.panel.indicator(indicator);
        let fd = ForecastData::new(&data.panel, &data.exo, indicator, pre.embeddings.h.clone(), cfg.forecast.spec)?;
        let linear = LinearBaseline::fit(series, splits.train.clone(), l, t, &cfg.linear)?;
        let mut push = |model: &str, region: usize, origin: usize, values: &[f64]| {
            for (k, &p) in values.iter().enumerate() {
                rows.push(PredictionRow {
                    model: model.to_string(),
                    indicator,
                    region,
                    origin,
                    step: origin + k,
                    actual: series[region][origin + k],
                    prediction: p,
                });
            }
        };
        for variant in variants {
            let fcfg = ForecastConfig {
                toggles: variant.toggles,
                ..cfg.forecast.clone()
            };
            let trained = train_forecaster(&fd, &train_o, &val_o, &pre.backbone, &fcfg, cfg.seed)?;
            for f in predict(&trained.model, &trained.store, &fd, &test_o, 8)? {
                push(&variant.name, f.region, f.origin, &f.values);
            }
            runs.push(RunSummary {
                indicator,
                model: variant.name.clone(),
                toggles: variant.toggles,
                epochs_run: trained.log.val_wmape.len(),
                best_epoch: trained.log.best_epoch,
                best_val_wmape: trained.log.val_wmape[trained.log.best_epoch],
            });
        }
        for &o in &test_o {
            for (r, s) in series.iter().enumerate() {
                push(WEEKLY_COUNTERPART, r, o, &weekly_counterpart(s, o, t)?);
                push(LINEAR, r, o, &linear.predict(s, r, o)?);
            }
        }
    }
    let mut report = Report::from_predictions(&rows, data, &cfg)?;
    report.runs = runs;
    report.wall_clock_secs = clock.elapsed().as_secs_f64();
    Ok(ExperimentOutput {
        report,
        predictions: rows,
        splits,
    })
}
