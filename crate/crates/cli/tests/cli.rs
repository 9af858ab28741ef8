use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvgr_core::eval::Report;

const BIN: &str = env!("CARGO_BIN_EXE_mvgr");

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.json")
}

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/tiny_report.json")
}

fn mvgr(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("MVGR_DATA_ROOT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mvgr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// synth + pretrain into `dir`, returning the two output directories.
fn prepare(dir: &Path) -> (PathBuf, PathBuf) {
    let (data, pre) = (dir.join("data"), dir.join("pre"));
    let c = fixture();
    ok(&["--config", p(&c), "synth", "--out", p(&data)]);
    ok(&["--config", p(&c), "pretrain", "--data", p(&data), "--out", p(&pre)]);
    (data, pre)
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let c = fixture();
    ok(&["--config", p(&c), "--seed", "7", "synth", "--out", p(&a)]);
    ok(&["--config", p(&c), "--seed", "7", "synth", "--out", p(&b)]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() >= 8, "{:?}", ta.keys());
    assert_eq!(ta, tb);
    let other = dir.path().join("c");
    ok(&["--config", p(&c), "--seed", "8", "synth", "--out", p(&other)]);
    assert_ne!(tree(&other)[Path::new("panel.csv")], ta[Path::new("panel.csv")]);
}

#[test]
fn evaluate_matches_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    let (data, pre) = prepare(dir.path());
    let out = dir.path().join("eval");
    ok(&["--config", p(&fixture()), "evaluate", "--data", p(&data), "--pretrained", p(&pre), "--out", p(&out)]);
    for f in ["report.json", "report.csv", "predictions.csv", "series_export.csv", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report = Report::read(&out.join("report.json")).unwrap().reproducible();
    if std::env::var_os("BLESS").is_some() {
        fs::create_dir_all(golden().parent().unwrap()).unwrap();
        fs::write(golden(), serde_json::to_string_pretty(&report).unwrap() + "\n").unwrap();
    }
    let expected = Report::read(&golden()).unwrap();
    assert_eq!(report.config_hash, expected.config_hash);
    assert_eq!((report.test_start.as_str(), report.test_end.as_str()), (expected.test_start.as_str(), expected.test_end.as_str()));
    assert_eq!(report.metrics.len(), expected.metrics.len());
    for (a, b) in report.metrics.iter().zip(&expected.metrics) {
        assert_eq!((a.indicator, &a.model, a.scope, &a.key, a.slots), (b.indicator, &b.model, b.scope, &b.key, b.slots));
        assert!((a.wmape - b.wmape).abs() <= 1e-9 * b.wmape.abs().max(1.0), "{a:?} vs {b:?}");
        assert!((a.mae - b.mae).abs() <= 1e-9 * b.mae.abs().max(1.0), "{a:?} vs {b:?}");
    }
    assert_eq!(report.runs, expected.runs);
}

#[test]
fn full_pipeline_produces_declared_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, pre) = prepare(dir.path());
    let c = fixture();
    for d in ["stage1", "backbone", "library"] {
        assert!(pre.join(d).join("manifest.json").exists(), "{d}");
    }
    let train = dir.path().join("train");
    ok(&["--config", p(&c), "train", "--data", p(&data), "--pretrained", p(&pre), "--out", p(&train)]);
    assert!(train.join("models/call_full/manifest.json").exists());
    let fc = dir.path().join("fc");
    ok(&[
        "--config", p(&c), "forecast", "--data", p(&data), "--pretrained", p(&pre), "--models", p(&train), "--out", p(&fc),
    ]);
    let preds = fs::read_to_string(fc.join("predictions.csv")).unwrap();
    assert!(preds.lines().nth(1).unwrap().starts_with("full,call,0,"));
    assert!(preds.lines().any(|l| l.starts_with("weekly_counterpart,tsh,")));

    let lib = pre.join("library");
    let q: serde_json::Value = serde_json::from_str(&ok(&["--config", p(&c), "embed", "query", "--library", p(&lib), "--region", "1"])).unwrap();
    let hits = q["neighbours"].as_array().unwrap();
    assert_eq!(hits.len(), 3);
    assert!(hits.iter().all(|h| h["region_id"] != 1));
    let cl = dir.path().join("cl");
    ok(&["--config", p(&c), "embed", "cluster", "--library", p(&lib), "--data", p(&data), "--out", p(&cl)]);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(cl.join("clusters.json")).unwrap()).unwrap();
    assert!(summary["purity"].as_f64().unwrap() > 0.0);
    let pr = dir.path().join("pr");
    ok(&["--config", p(&c), "embed", "project", "--library", p(&lib), "--out", p(&pr)]);
    assert!(fs::read_to_string(pr.join("projection.csv")).unwrap().starts_with("region_id,x,y,cluster\n"));

    let up = dir.path().join("up");
    ok(&["--config", p(&c), "uplift", "train", "--data", p(&data), "--library", p(&lib), "--out", p(&up)]);
    let ue = dir.path().join("ue");
    let model = up.join("model");
    let args = ["--config", p(&c), "uplift", "eval", "--model", p(&model), "--samples"];
    let samples = up.join("test_samples.csv");
    ok(&[&args[..], &[p(&samples), "--library", p(&lib), "--out", p(&ue)]].concat());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(ue.join("qini_report.json")).unwrap()).unwrap();
    assert_eq!(report["treatments"].as_array().unwrap().len(), 5);
    assert!(report["embedding_dim"].as_u64().unwrap() > 0);
    // The model was trained on augmented features, so the library is needed.
    let out = mvgr(&[&args[..], &[p(&samples), "--out", p(&ue)]].concat());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 1, "experiment": {"forecast": {"lora_rnk": 4}}}"#).unwrap();
    let out = mvgr(&["--config", p(&cfg), "synth", "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    let line: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(line["error"], "usage");
    assert_eq!(line["key"], "experiment.forecast.lora_rnk");
    assert!(!dir.path().join("o").exists());
}

#[test]
fn usage_and_runtime_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let c = fixture();
    let o = dir.path().join("o");
    let code = |args: &[&str]| mvgr(args).status.code();
    assert_eq!(code(&["--config", p(&c), "synth", "--out", p(&o), "--frobnicate"]), Some(2));
    assert_eq!(code(&["synth", "--out", p(&o)]), Some(2));
    assert_eq!(code(&["--config", p(&dir.path().join("nope.json")), "synth", "--out", p(&o)]), Some(2));
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"seed": 1, "experiment": {"forecast": {"k_p": 0}}}"#).unwrap();
    assert_eq!(code(&["--config", p(&bad), "synth", "--out", p(&o)]), Some(2));
    let unseeded = dir.path().join("unseeded.json");
    fs::write(&unseeded, "{}").unwrap();
    let out = mvgr(&["--config", p(&unseeded), "synth", "--out", p(&o)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("\"key\":\"seed\""));
    // Missing artifacts abort before anything is written.
    let out = mvgr(&["--config", p(&c), "pretrain", "--data", p(&dir.path().join("none")), "--out", p(&o)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing artifact"));
    assert!(!o.exists());
    assert!(!dir.path().join("o").exists());
}

#[test]
fn help_documents_every_subcommand() {
    let help = ok(&["--help"]);
    for s in ["synth", "pretrain", "train", "forecast", "evaluate", "ablate", "embed", "uplift", "--config", "--seed", "--dry-run"] {
        assert!(help.contains(s), "{s} missing from help");
    }
    assert!(ok(&["embed", "--help"]).contains("project"));
    assert!(ok(&["uplift", "eval", "--help"]).contains("--samples"));
}

#[test]
fn dry_run_has_no_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    let plan = ok(&["--config", p(&fixture()), "--dry-run", "synth", "--out", p(&o)]);
    assert!(plan.starts_with("plan: synth (seed 7)"), "{plan}");
    assert!(!o.exists());
    let plan = ok(&["--config", p(&fixture()), "--dry-run", "pretrain", "--data", p(&o), "--out", p(&dir.path().join("x"))]);
    assert!(plan.contains("(missing)"), "{plan}");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    fs::create_dir_all(&o).unwrap();
    fs::write(o.join(".mvgr.lock"), "").unwrap();
    let out = mvgr(&["--config", p(&fixture()), "synth", "--out", p(&o)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("in use"));
    fs::remove_file(o.join(".mvgr.lock")).unwrap();
    ok(&["--config", p(&fixture()), "synth", "--out", p(&o)]);
    assert!(!o.join(".mvgr.lock").exists());
}

#[test]
fn data_root_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(fixture(), dir.path().join("tiny.json")).unwrap();
    let out = Command::new(BIN)
        .args(["--config", "tiny.json", "synth", "--out", "data"])
        .env("MVGR_DATA_ROOT", dir.path())
        .current_dir(std::env::temp_dir())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("data/panel.csv").exists());
}
