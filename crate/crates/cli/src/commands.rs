//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use mvgr_core::embedlib::{
    kmeans, load_library, project_2d, purity, records_from_embeddings, save_library, top_k_similar, write_projection_csv,
    EmbeddingRecord, Level,
};
use mvgr_core::eval::{
    pretrain_all, run_experiment, split_origins, train_variant, weekly_counterpart, write_predictions_csv, write_series_export,
    Dataset, PredictionRow, Pretrained, Variant, ACTIVITY_CSV, CITY_DIR, PANEL_CSV, PREDICTIONS_CSV, REPORT_CSV, REPORT_JSON,
    SERIES_EXPORT_CSV, STAGE1_DIR, BACKBONE_DIR, WEEKLY_COUNTERPART,
};
use mvgr_core::forecast::{load_forecaster, predict, save_forecaster, ForecastData, ForecastTrainLog};
use mvgr_core::synth::read_city;
use mvgr_core::uplift::{
    augment_features, evaluate_qini, generate_uplift, read_samples_csv, train_uplift, write_samples_csv, MultiHeadModel, UpliftData,
    QINI_REPORT_JSON,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::{Cli, Command, EmbedCommand, UpliftCommand};

pub const DATA_ROOT_ENV: &str = "MVGR_DATA_ROOT";
const LOCK_FILE: &str = ".mvgr.lock";
const CONFIG_JSON: &str = "config.json";
const MODELS_DIR: &str = "models";
const LIBRARY_DIR: &str = "library";
const MODEL_DIR: &str = "model";

/// Inputs, steps and output directory of one invocation.
struct Plan {
    command: String,
    seed: u64,
    reads: Vec<PathBuf>,
    steps: Vec<String>,
    out: Option<PathBuf>,
}

impl Plan {
    fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            command: command.into(),
            seed: cfg.seed(),
            reads: Vec::new(),
            steps: Vec::new(),
            out: None,
        }
    }

    fn read(mut self, p: &Path) -> Self {
        self.reads.push(p.to_path_buf());
        self
    }

    fn step(mut self, s: impl Into<String>) -> Self {
        self.steps.push(s.into());
        self
    }

    fn out(mut self, p: &Path) -> Self {
        self.out = Some(p.to_path_buf());
        self
    }

    fn print(&self) {
        println!("plan: {} (seed {})", self.command, self.seed);
        for r in &self.reads {
            let note = if r.exists() { "" } else { " (missing)" };
            println!("  read  {}{note}", r.display());
        }
        for s in &self.steps {
            println!("  step  {s}");
        }
        if let Some(o) = &self.out {
            println!("  write {}", o.display());
        }
    }

    fn check_inputs(&self) -> CliResult<()> {
        match self.reads.iter().find(|p| !p.exists()) {
            Some(p) => Err(CliError::Runtime(format!("missing artifact: {} not found", p.display()))),
            None => Ok(()),
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Runtime(format!(
                "output directory {} is in use by another run (remove {} if that run died)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Runtime(format!("cannot create {}: {e}", path.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Ctx {
    cfg: RunConfig,
    dry_run: bool,
    root: Option<PathBuf>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        match &self.root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        }
    }

    /// Prints the plan on a dry run; otherwise checks inputs and locks the
    /// output directory. `None` means stop here.
    fn begin(&self, plan: &Plan) -> CliResult<Option<Option<OutputLock>>> {
        if self.dry_run {
            plan.print();
            return Ok(None);
        }
        plan.check_inputs()?;
        let lock = plan.out.as_deref().map(OutputLock::acquire).transpose()?;
        Ok(Some(lock))
    }

    fn write_config(&self, out: &Path) -> CliResult<()> {
        write_json(&out.join(CONFIG_JSON), &self.cfg)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn run(cli: Cli) -> CliResult<()> {
    let root = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    if let Command::Defaults = cli.command {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(cfg.experiment.seed);
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let config = cli.global.config.ok_or_else(|| CliError::usage("--config is required"))?;
    let config = match &root {
        Some(r) if config.is_relative() => r.join(config),
        _ => config,
    };
    let cfg = RunConfig::load(&config)?.resolve(cli.global.seed)?;
    let ctx = Ctx {
        cfg,
        dry_run: cli.global.dry_run,
        root,
    };
    match cli.command {
        Command::Synth { out } => synth(&ctx, &ctx.path(&out)),
        Command::Pretrain { data, out } => pretrain(&ctx, &ctx.path(&data), &ctx.path(&out)),
        Command::Train {
            data,
            pretrained,
            variant,
            out,
        } => train(&ctx, &ctx.path(&data), &ctx.path(&pretrained), &variant, &ctx.path(&out)),
        Command::Forecast {
            data,
            pretrained,
            models,
            variant,
            out,
        } => forecast(&ctx, &ctx.path(&data), &ctx.path(&pretrained), &ctx.path(&models), &variant, &ctx.path(&out)),
        Command::Evaluate { data, pretrained, out } => {
            evaluate(&ctx, "evaluate", &ctx.path(&data), &ctx.path(&pretrained), &ctx.path(&out), vec![Variant::full()])
        }
        Command::Ablate { data, pretrained, out } => {
            evaluate(&ctx, "ablate", &ctx.path(&data), &ctx.path(&pretrained), &ctx.path(&out), Variant::ablations())
        }
        Command::Embed { command } => match command {
            EmbedCommand::Query { library, region, k, out } => {
                embed_query(&ctx, &ctx.path(&library), region, k, out.map(|o| ctx.path(&o)).as_deref())
            }
            EmbedCommand::Cluster { library, data, out } => {
                embed_cluster(&ctx, &ctx.path(&library), data.map(|d| ctx.path(&d)).as_deref(), &ctx.path(&out))
            }
            EmbedCommand::Project { library, out } => embed_project(&ctx, &ctx.path(&library), &ctx.path(&out)),
        },
        Command::Uplift { command } => match command {
            UpliftCommand::Train { data, library, out } => {
                uplift_train(&ctx, &ctx.path(&data), library.map(|l| ctx.path(&l)).as_deref(), &ctx.path(&out))
            }
            UpliftCommand::Eval {
                model,
                samples,
                library,
                out,
            } => uplift_eval(
                &ctx,
                &ctx.path(&model),
                &ctx.path(&samples),
                library.map(|l| ctx.path(&l)).as_deref(),
                &ctx.path(&out),
            ),
        },
        Command::Defaults => unreachable!("handled above"),
    }
}

fn data_plan(plan: Plan, data: &Path) -> Plan {
    plan.read(&data.join(CITY_DIR)).read(&data.join(PANEL_CSV)).read(&data.join(ACTIVITY_CSV))
}

fn pretrained_plan(plan: Plan, pre: &Path) -> Plan {
    plan.read(&pre.join(STAGE1_DIR)).read(&pre.join(BACKBONE_DIR))
}

fn synth(ctx: &Ctx, out: &Path) -> CliResult<()> {
    let e = &ctx.cfg.experiment;
    let plan = Plan::new("synth", &ctx.cfg)
        .step(format!(
            "generate a city with {} counties and a {}-week panel",
            e.city.n_counties(),
            e.panel.weeks
        ))
        .step(format!("write {CITY_DIR}/, {PANEL_CSV}, {ACTIVITY_CSV}, {CONFIG_JSON}"))
        .out(out);
    let Some(_lock) = ctx.begin(&plan)? else { return Ok(()) };
    let data = Dataset::generate(e)?;
    data.save(out)?;
    ctx.write_config(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn pretrain(ctx: &Ctx, data_dir: &Path, out: &Path) -> CliResult<()> {
    let plan = data_plan(Plan::new("pretrain", &ctx.cfg), data_dir)
        .step(format!("stage-1 pretraining for {} steps", ctx.cfg.experiment.stage1.steps))
        .step(format!("backbone pretraining for {} steps", ctx.cfg.experiment.backbone.steps))
        .step(format!("write {STAGE1_DIR}/, {BACKBONE_DIR}/, {LIBRARY_DIR}/, stage1_losses.csv, {CONFIG_JSON}"))
        .out(out);
    let Some(_lock) = ctx.begin(&plan)? else { return Ok(()) };
    let data = Dataset::load(data_dir)?;
    let pre = pretrain_all(&data, &ctx.cfg.experiment)?;
    pre.save(out)?;
    let hash = ctx.cfg.experiment.hash()?;
    let records = records_from_embeddings(&pre.embeddings, &format!("v-{}", &hash[..12]), &hash);
    let created = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
    save_library(&records, &out.join(LIBRARY_DIR), &created)?;
    let mut w = csv::Writer::from_path(out.join("stage1_losses.csv"))?;
    for l in &pre.stage1_losses {
        w.serialize(l)?;
    }
    w.flush()?;
    ctx.write_config(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn model_dir(models: &Path, indicator: mvgr_core::synth::Indicator, variant: &str) -> PathBuf {
    models.join(MODELS_DIR).join(format!("{}_{variant}", indicator.name()))
}

fn train(ctx: &Ctx, data_dir: &Path, pre_dir: &Path, variant: &str, out: &Path) -> CliResult<()> {
    let v = Variant::by_name(variant)?;
    let e = &ctx.cfg.experiment;
    let names: Vec<&str> = e.indicators.iter().map(|i| i.name()).collect();
    let plan = pretrained_plan(data_plan(Plan::new("train", &ctx.cfg), data_dir), pre_dir)
        .step(format!("train `{variant}` for {} (up to {} epochs each)", names.join(", "), e.forecast.epochs))
        .step(format!("write {MODELS_DIR}/<indicator>_{variant}/, train_log.json, {CONFIG_JSON}"))
        .out(out);
    let Some(_lock) = ctx.begin(&plan)? else { return Ok(()) };
    let data = Dataset::load(data_dir)?;
    let pre = Pretrained::load(pre_dir)?;
    let mut logs: BTreeMap<String, ForecastTrainLog> = BTreeMap::new();
    for &indicator in &e.indicators {
        let (_, trained, fcfg) = train_variant(&data, &pre, e, indicator, &v)?;
        save_forecaster(&model_dir(out, indicator, variant), &trained, &fcfg, e.seed, &pre.backbone)?;
        logs.insert(indicator.name().to_string(), trained.log);
    }
    write_json(&out.join("train_log.json"), &logs)?;
    ctx.write_config(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn forecast(ctx: &Ctx, data_dir: &Path, pre_dir: &Path, models: &Path, variant: &str, out: &Path) -> CliResult<()> {
    Variant::by_name(variant)?;
    let e = &ctx.cfg.experiment;
    let mut plan = pretrained_plan(data_plan(Plan::new("forecast", &ctx.cfg), data_dir), pre_dir);
    for &i in &e.indicators {
        plan = plan.read(&model_dir(models, i, variant));
    }
    let plan = plan
        .step("forecast every test origin, with the weekly counterpart as reference")
        .step(format!("write {PREDICTIONS_CSV}, {SERIES_EXPORT_CSV}"))
        .out(out);
    let Some(_lock) = ctx.begin(&plan)? else { return Ok(()) };
    let data = Dataset::load(data_dir)?;
    let pre = Pretrained::load(pre_dir)?;
    let origins = split_origins(&data, e)?;
    let mut rows = Vec::new();
    for &indicator in &e.indicators {
        let fd = ForecastData::new(&data.panel, &data.exo, indicator, pre.embeddings.h.clone(), e.forecast.spec)?;
        let (trained, _) = load_forecaster(&model_dir(models, indicator, variant), &fd, &pre.backbone)?;
        let series = data.panel.indicator(indicator);
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
        for f in predict(&trained.model, &trained.store, &fd, &origins.test, 8)? {
            push(variant, f.region, f.origin, &f.values);
        }
        for &o in &origins.test {
            for (r, s) in series.iter().enumerate() {
                push(WEEKLY_COUNTERPART, r, o, &weekly_counterpart(s, o, e.forecast.spec.horizon)?);
            }
        }
    }
    write_predictions_csv(&out.join(PREDICTIONS_CSV), &rows, &data)?;
    write_series_export(&out.join(SERIES_EXPORT_CSV), &rows, variant, WEEKLY_COUNTERPART, &data)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn evaluate(ctx: &Ctx, command: &str, data_dir: &Path, pre_dir: &Path, out: &Path, variants: Vec<Variant>) -> CliResult<()> {
    let names: Vec<&str> = variants.iter().map(|v| v.name.as_str()).collect();
    let plan = pretrained_plan(data_plan(Plan::new(command, &ctx.cfg), data_dir), pre_dir)
        .step(format!("train {} per indicator", names.join(", ")))
        .step("score against the weekly counterpart and linear baselines")
        .step(format!("write {REPORT_JSON}, {REPORT_CSV}, {PREDICTIONS_CSV}, {SERIES_EXPORT_CSV}, {CONFIG_JSON}"))
        .out(out);
    let Some(_lock) = ctx.begin(&plan)? else { return Ok(()) };
    let data = Dataset::load(data_dir)?;
    let pre = Pretrained::load(pre_dir)?;
    let result = run_experiment(&data, &pre, &ctx.cfg.experiment, &variants)?;
    result.report.write(out)?;
    write_predictions_csv(&out.join(PREDICTIONS_CSV), &result.predictions, &data)?;
    write_series_export(&out.join(SERIES_EXPORT_CSV), &result.predictions, "full", WEEKLY_COUNTERPART, &data)?;
    ctx.write_config(out)?;
    for &i in &ctx.cfg.experiment.indicators {
        for m in names.iter().copied().chain([WEEKLY_COUNTERPART, mvgr_core::eval::LINEAR]) {
            if let Some(r) = result.report.pooled(i, m) {
                println!("{} {m}: wmape {:.4} mae {:.4}", i.name(), r.wmape, r.mae);
            }
        }
    }
    Ok(())
}

fn level_vectors(records: &[EmbeddingRecord], level: Level) -> CliResult<(Vec<usize>, Vec<Vec<f64>>)> {
    let picked: Vec<&EmbeddingRecord> = records.iter().filter(|r| r.level == level).collect();
    if picked.is_empty() {
        return Err(CliError::Runtime(format!("library has no {level} vectors")));
    }
    Ok((
        picked.iter().map(|r| r.region_id).collect(),
        picked.iter().map(|r| r.vector.iter().map(|&v| f64::from(v)).collect()).collect(),
    ))
}

#[derive(Serialize)]
struct Neighbour {
    region_id: usize,
    score: f64,
}

#[derive(Serialize)]
struct QueryResult {
    library_version: String,
    level: Level,
    region_id: usize,
    neighbours: Vec<Neighbour>,
}

fn embed_query(ctx: &Ctx, library: &Path, region: usize, k: Option<usize>, out: Option<&Path>) -> CliResult<()> {
    let level = ctx.cfg.embed.level;
    let k = k.unwrap_or(ctx.cfg.embed.top_k);
    if k == 0 {
        return Err(CliError::usage("--k must be positive"));
    }
    let mut plan = Plan::new("embed query", &ctx.cfg)
        .read(library)
        .step(format!("top {k} {level} neighbours of region {region} by cosine similarity"));
    if let Some(o) = out {
        plan = plan.step("write query.json").out(o);
    }
    let Some(_lock) = ctx.begin(&plan)? else { return Ok(()) };
    let (manifest, records) = load_library(library)?;
    let me = records
        .iter()
        .find(|r| r.level == level && r.region_id == region)
        .ok_or_else(|| CliError::Runtime(format!("region {region} has no {level} vector in the library")))?;
    let query: Vec<f64> = me.vector.iter().map(|&v| f64::from(v)).collect();
    let pool = records.iter().filter(|r| r.level == level).count();
    let hits = top_k_similar(&records, &query, (k + 1).min(pool), Some(level))?;
    let neighbours = hits
        .into_iter()
        .filter(|&(id, _)| id != region)
        .take(k)
        .map(|(region_id, score)| Neighbour { region_id, score })
        .collect();
    let result = QueryResult {
        library_version: manifest.version,
        level,
        region_id: region,
        neighbours,
    };
    println!("{}", serde_json::to_string(&result)?);
    if let Some(o) = out {
        write_json(&o.join("query.json"), &result)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ClusterSummary {
    level: Level,
    k: usize,
    inertia: f64,
    history: Vec<f64>,
    purity: Option<f64>,
}

fn embed_cluster(ctx: &Ctx, library: &Path, data: Option<&Path>, out: &Path) -> CliResult<()> {
    let ec = &ctx.cfg.embed;
    let mut plan = Plan::new("embed cluster", &ctx.cfg).read(library);
    if let Some(d) = data {
        plan = plan.read(&d.join(CITY_DIR));
    }
    let plan = plan
        .step(format!("k-means with k = {} on {} vectors", ec.k, ec.level))
        .step("write clusters.csv, clusters.json")
        .out(out);
    let Some(_lock) = ctx.begin(&plan)? else { return Ok(()) };
    let (_, records) = load_library(library)?;
    let (ids, vectors) = level_vectors(&records, ec.level)?;
    let km = kmeans(&vectors, ec.k, ctx.cfg.seed(), ec.max_iters)?;
    let purity = match (data, ec.level) {
        (Some(d), Level::County) => {
            let archetypes = read_city(&d.join(CITY_DIR))?.archetypes();
            let labels = ids
                .iter()
                .map(|&i| archetypes.get(i).copied().ok_or_else(|| CliError::Runtime(format!("city has no county {i}"))))
                .collect::<CliResult<Vec<_>>>()?;
            Some(purity(&km.assignments, &labels)?)
        }
        _ => None,
    };
    let mut w = csv::Writer::from_path(out.join("clusters.csv"))?;
    w.write_record(["region_id", "cluster"])?;
    for (id, c) in ids.iter().zip(&km.assignments) {
        w.write_record([id.to_string(), c.to_string()])?;
    }
    w.flush()?;
    let summary = ClusterSummary {
        level: ec.level,
        k: ec.k,
        inertia: km.inertia,
        history: km.history,
        purity,
    };
    write_json(&out.join("clusters.json"), &summary)?;
    match purity {
        Some(p) => println!("inertia {:.6} purity {p:.3}", summary.inertia),
        None => println!("inertia {:.6}", summary.inertia),
    }
    Ok(())
}

fn embed_project(ctx: &Ctx, library: &Path, out: &Path) -> CliResult<()> {
    let ec = &ctx.cfg.embed;
    let plan = Plan::new("embed project", &ctx.cfg)
        .read(library)
        .step(format!("PCA to two dimensions of {} vectors, k-means labels with k = {}", ec.level, ec.k))
        .step("write projection.csv")
        .out(out);
    let Some(_lock) = ctx.begin(&plan)? else { return Ok(()) };
    let (_, records) = load_library(library)?;
    let (ids, vectors) = level_vectors(&records, ec.level)?;
    let p = project_2d(&vectors)?;
    let km = kmeans(&vectors, ec.k.min(vectors.len()), ctx.cfg.seed(), ec.max_iters)?;
    write_projection_csv(&out.join("projection.csv"), &ids, &p, &km.assignments)?;
    println!("wrote {}", out.join("projection.csv").display());
    Ok(())
}

fn augment_if(data: &UpliftData, library: Option<&Path>, level: Level) -> CliResult<UpliftData> {
    let lib = library.ok_or_else(|| CliError::usage("--library is required for embedding-augmented uplift"))?;
    let (_, records) = load_library(lib)?;
    Ok(augment_features(data, &records, level)?)
}

fn uplift_train(ctx: &Ctx, data_dir: &Path, library: Option<&Path>, out: &Path) -> CliResult<()> {
    let uc = &ctx.cfg.uplift;
    if uc.augment && library.is_none() {
        return Err(CliError::usage("--library is required when uplift.augment is true"));
    }
    let mut plan = Plan::new("uplift train", &ctx.cfg).read(&data_dir.join(CITY_DIR));
    if let Some(l) = library.filter(|_| uc.augment) {
        plan = plan.read(l);
    }
    let plan = plan
        .step(format!(
            "generate {} samples over {} treatments, hold out {:.0}%",
            uc.generator.n_samples,
            uc.generator.treatments.len(),
            uc.test_fraction * 100.0
        ))
        .step(format!(
            "train the multi-head model for {} epochs{}",
            uc.train.epochs,
            if uc.augment { " on embedding-augmented features" } else { "" }
        ))
        .step(format!("write train_samples.csv, test_samples.csv, {MODEL_DIR}/, train_log.json, {CONFIG_JSON}"))
        .out(out);
    let Some(_lock) = ctx.begin(&plan)? else { return Ok(()) };
    let city = read_city(&data_dir.join(CITY_DIR))?;
    let data = generate_uplift(&city, &uc.generator)?;
    let (train, test) = data.split(1.0 - uc.test_fraction, ctx.cfg.seed())?;
    write_samples_csv(&out.join("train_samples.csv"), &train)?;
    write_samples_csv(&out.join("test_samples.csv"), &test)?;
    let fit_on = if uc.augment { augment_if(&train, library, uc.level)? } else { train };
    let (model, log) = train_uplift(&fit_on, &uc.train)?;
    model.save(&out.join(MODEL_DIR))?;
    write_json(&out.join("train_log.json"), &log)?;
    ctx.write_config(out)?;
    println!(
        "trained on {} samples, final loss {:.4}",
        fit_on.samples.len(),
        log.eval_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn uplift_eval(ctx: &Ctx, model_dir: &Path, samples: &Path, library: Option<&Path>, out: &Path) -> CliResult<()> {
    let uc = &ctx.cfg.uplift;
    let mut plan = Plan::new("uplift eval", &ctx.cfg).read(model_dir).read(samples);
    if let Some(l) = library {
        plan = plan.read(l);
    }
    let plan = plan
        .step(format!("QINI per treatment with {} permutations for the null band", uc.permutations))
        .step(format!("write {QINI_REPORT_JSON}"))
        .out(out);
    let Some(_lock) = ctx.begin(&plan)? else { return Ok(()) };
    let model = MultiHeadModel::load(model_dir)?;
    let mut data = read_samples_csv(samples, &model.treatments)?;
    if model.embedding_dim > 0 {
        data = augment_if(&data, library, uc.level)?;
    }
    if data.feature_dim() != model.input_dim {
        return Err(CliError::Runtime(format!(
            "samples have {} features, the model expects {}",
            data.feature_dim(),
            model.input_dim
        )));
    }
    let report = evaluate_qini(&model, &data, uc.permutations, ctx.cfg.seed())?;
    report.write(&out.join(QINI_REPORT_JSON))?;
    for t in &report.treatments {
        println!("{}: qini {:.4} (null {:.4} .. {:.4})", t.treatment, t.qini, t.null_low, t.null_high);
    }
    println!("mean qini {:.4}", report.mean_qini);
    Ok(())
}
