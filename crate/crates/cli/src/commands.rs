use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::info;
use max360iq::data::{
    build_samples, generate_synthetic, save_viewport_png, split_train_test, write_atomic, write_manifest, Dataset, ExtractionConfig, ExtractionMode, Sample,
};
use max360iq::evaluation::{evaluate_mapped, EvalReport};
use max360iq::gradsuite::{run_suite, summarize};
use max360iq::sphere::ViewingCondition;
use max360iq::trainer::{aggregate_predictions, predict, train, Checkpoint, EpochRecord, Trainer};
use max360iq::{Error, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::{self, Dtype, RunConfig};
use crate::{Cli, Command};

#[derive(Debug, thiserror::Error)]
#[error("gradient check failed for {0}")]
struct GradcheckFailed(String);

/// 1: usage or configuration, 3: numerical failure, 2: anything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<GradcheckFailed>() {
            return 3;
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Config(_) | Error::UnknownParam(_) => 1,
                _ if err.is_numeric() => 3,
                _ => 2,
            };
        }
    }
    2
}

fn resolve(cli: &Cli, extra: Vec<String>) -> Result<RunConfig> {
    let mut overrides = cli.global.overrides.clone();
    overrides.extend(extra);
    let mut cfg = config::load(cli.global.config.as_deref(), &overrides)?;
    if let Some(seed) = cli.global.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    write_atomic(path, &w.into_inner()?)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads.max(1)).build_global().context("starting worker pool")?;
    match &cli.command {
        Command::Synth { out, mode, scenes } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(format!("synth.mode=\"{m}\""));
            }
            if let Some(n) = scenes {
                extra.push(format!("synth.n_scenes={n}"));
            }
            let cfg = resolve(&cli, extra)?;
            let manifest = generate_synthetic(&cfg.synth, out)?;
            println!("{}", manifest.display());
            Ok(())
        }
        Command::Extract { manifest, out, k, fov, size, mode } => {
            let mut extra = Vec::new();
            if let Some(k) = k {
                extra.push(format!("extraction.k={k}"));
            }
            if let Some(f) = fov {
                extra.push(format!("extraction.fov={:?}", f.to_radians()));
            }
            if let Some(s) = size {
                extra.push(format!("extraction.size={s}"));
            }
            if let Some(m) = mode {
                m.parse::<ExtractionMode>()?;
                extra.push(format!("extraction.mode=\"{}\"", m.to_ascii_lowercase()));
            }
            let cfg = resolve(&cli, extra)?;
            extract(manifest, out, &cfg.extraction)
        }
        Command::Train { manifest, out, resume } => {
            let cfg = resolve(&cli, Vec::new())?;
            match cfg.dtype {
                Dtype::F32 => train_command::<f32>(manifest, out, resume.as_deref(), &cfg),
                Dtype::F64 => train_command::<f64>(manifest, out, resume.as_deref(), &cfg),
            }
        }
        Command::Predict { checkpoint, manifest, out, images_out, chunk, dtype } => match dtype {
            Dtype::F32 => predict_command::<f32>(checkpoint, manifest, out, images_out.as_deref(), *chunk),
            Dtype::F64 => predict_command::<f64>(checkpoint, manifest, out, images_out.as_deref(), *chunk),
        },
        Command::Eval { predictions, out_json, out_csv, image_level } => eval_command(predictions, out_json, out_csv.as_deref(), *image_level),
        Command::Gradcheck { seeds, only, corrupt } => gradcheck(*seeds, only, *corrupt),
        Command::SweepK { manifest, k_list, out } => {
            let cfg = resolve(&cli, Vec::new())?;
            match cfg.dtype {
                Dtype::F32 => sweep_k::<f32>(manifest, k_list, out, &cfg),
                Dtype::F64 => sweep_k::<f64>(manifest, k_list, out, &cfg),
            }
        }
    }
}

#[derive(Serialize)]
struct ViewportRecord {
    t: usize,
    file: String,
    lon: f64,
    lat: f64,
}

#[derive(Serialize)]
struct SequenceRecord {
    condition: Option<ViewingCondition>,
    viewports: Vec<ViewportRecord>,
}

#[derive(Serialize)]
struct ExtractSidecar<'a> {
    image_id: &'a str,
    k: usize,
    fov: f64,
    size: usize,
    mode: ExtractionMode,
    sequences: Vec<SequenceRecord>,
}

fn extract(manifest: &Path, out: &Path, cfg: &ExtractionConfig) -> Result<()> {
    let ds = Dataset::load(manifest)?;
    let samples = build_samples::<f64>(&ds.entries, &ds.images, cfg)?;
    let mut by_image: BTreeMap<&str, Vec<&Sample<f64>>> = BTreeMap::new();
    for s in &samples {
        by_image.entry(&s.image_id).or_default().push(s);
    }
    let mut files = 0;
    for (id, seqs) in by_image {
        let dir = out.join(id);
        create_dir(&dir)?;
        let mut records = Vec::new();
        for s in seqs {
            let label = s.condition.map_or("equator", ViewingCondition::as_str);
            let mut viewports = Vec::new();
            for (t, spec) in s.sequence.specs.iter().enumerate() {
                let file = format!("{label}_{t:02}.png");
                save_viewport_png(&s.sequence.viewports.index_outer(t), &dir.join(&file))?;
                viewports.push(ViewportRecord { t, file: format!("{id}/{file}"), lon: spec.center.lon(), lat: spec.center.lat() });
                files += 1;
            }
            records.push(SequenceRecord { condition: s.condition, viewports });
        }
        let sidecar = ExtractSidecar { image_id: id, k: cfg.k, fov: cfg.fov, size: cfg.size, mode: cfg.mode, sequences: records };
        write_text(&out.join(format!("{id}.json")), &serde_json::to_string_pretty(&sidecar)?)?;
    }
    info!("wrote {files} viewports under {}", out.display());
    Ok(())
}

struct Splits {
    train: Dataset,
    val: Dataset,
    test: Dataset,
}

fn split(ds: &Dataset, cfg: &RunConfig) -> Result<Splits> {
    let (train, test) = split_train_test(&ds.entries, cfg.split.ratio, cfg.split.seed)?;
    let (train, val) = if cfg.split.val_ratio > 0.0 {
        split_train_test(&train, 1.0 - cfg.split.val_ratio, cfg.split.seed.wrapping_add(1))?
    } else {
        (train, Vec::new())
    };
    Ok(Splits { train: ds.select(&train), val: ds.select(&val), test: ds.select(&test) })
}

fn samples<T: Scalar>(ds: &Dataset, cfg: &ExtractionConfig) -> Result<Vec<Sample<T>>> {
    Ok(build_samples(&ds.entries, &ds.images, cfg)?)
}

fn score<T: Scalar>(store: &max360iq::ndgrad::ParamStore<T>, model: &max360iq::model::ModelConfig, test: &[Sample<T>]) -> Result<Option<EvalReport>> {
    if test.len() < 3 {
        return Ok(None);
    }
    let pred: Vec<f64> = predict(store, model, test, 16)?.into_iter().map(|v| v.to_f64_lossy()).collect();
    let mos: Vec<f64> = test.iter().map(|s| s.mos).collect();
    let conds: Option<Vec<ViewingCondition>> = test.iter().map(|s| s.condition).collect();
    Ok(Some(evaluate_mapped(&pred, &mos, conds.as_deref())?.0))
}

fn train_command<T: Scalar>(manifest: &Path, out: &Path, resume: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let ds = Dataset::load(manifest)?;
    let splits = split(&ds, cfg)?;
    create_dir(out)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    write_manifest(out, "train_manifest.csv", &ds.header, &splits.train.entries)?;
    write_manifest(out, "test_manifest.csv", &ds.header, &splits.test.entries)?;
    if !splits.val.entries.is_empty() {
        write_manifest(out, "val_manifest.csv", &ds.header, &splits.val.entries)?;
    }

    let trainer = match resume {
        Some(p) => {
            let mut t = Trainer::from_checkpoint(Checkpoint::<T>::load(p)?)?;
            t.cfg.epochs = cfg.train.epochs;
            t.cfg.max_steps = cfg.train.max_steps;
            t
        }
        None => Trainer::<T>::new(&cfg.model, &cfg.train, &cfg.extraction)?,
    };
    let extraction = trainer.extraction;
    let train_set = samples::<T>(&splits.train, &extraction)?;
    let val_set = samples::<T>(&splits.val, &extraction)?;
    let test_set = samples::<T>(&splits.test, &extraction)?;
    info!("{} training, {} validation, {} test sequences", train_set.len(), val_set.len(), test_set.len());

    let log_path = out.join("log.jsonl");
    let mut log = String::new();
    let outcome = train(trainer, &train_set, &val_set, &mut |r: &EpochRecord| {
        log.push_str(&serde_json::to_string(r)?);
        log.push('\n');
        write_atomic(&log_path, log.as_bytes())?;
        info!("epoch {} step {} loss {:?} val srcc {:?}", r.epoch, r.step, r.train_loss, r.val_srcc);
        Ok(())
    })?;
    outcome.best.save(&out.join("best.ckpt"))?;
    outcome.last.save(&out.join("last.ckpt"))?;

    let report = score(&outcome.best.store, &outcome.best.model, &test_set)?;
    if let Some(r) = &report {
        write_text(&out.join("test_report.json"), &serde_json::to_string_pretty(r)?)?;
    }
    let summary = serde_json::json!({
        "epochs": outcome.history.len(),
        "steps": outcome.last.step,
        "final_loss": outcome.history.last().and_then(|r| r.train_loss),
        "test_plcc": report.as_ref().map(|r| r.plcc),
        "test_srcc": report.as_ref().map(|r| r.srcc),
    });
    println!("{summary}");
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PredictionRow {
    image_id: String,
    condition: String,
    pred: f64,
    mos: f64,
}

#[derive(Serialize)]
struct ImageRow<'a> {
    image_id: &'a str,
    scene_id: &'a str,
    pred: f64,
    mos: f64,
}

fn predict_command<T: Scalar>(checkpoint: &Path, manifest: &Path, out: &Path, images_out: Option<&Path>, chunk: usize) -> Result<()> {
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let ds = Dataset::load(manifest)?;
    let set = samples::<T>(&ds, &ck.extraction)?;
    let scores = predict(&ck.store, &ck.model, &set, chunk)?;
    let rows: Vec<PredictionRow> = set
        .iter()
        .zip(&scores)
        .map(|(s, v)| PredictionRow {
            image_id: s.image_id.clone(),
            condition: s.condition.map_or(String::new(), |c| c.to_string()),
            pred: v.to_f64_lossy(),
            mos: s.mos,
        })
        .collect();
    write_csv(out, &rows)?;
    if let Some(path) = images_out {
        let images = aggregate_predictions(&set, &scores)?;
        let mos: BTreeMap<&str, f64> = ds.entries.iter().map(|e| (e.image_id.as_str(), e.mos)).collect();
        let rows: Vec<ImageRow> =
            images.iter().map(|p| ImageRow { image_id: &p.image_id, scene_id: &p.scene_id, pred: p.score, mos: mos[p.image_id.as_str()] }).collect();
        write_csv(path, &rows)?;
    }
    info!("scored {} sequences", rows.len());
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse { path: path.into(), line: 0, msg: e.to_string() })?;
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<PredictionRow>().enumerate() {
        let row = rec.map_err(|e| Error::Parse { path: path.into(), line: i + 2, msg: e.to_string() })?;
        if !row.pred.is_finite() || !row.mos.is_finite() {
            return Err(Error::Parse { path: path.into(), line: i + 2, msg: "non-finite value".into() }.into());
        }
        rows.push(row);
    }
    Ok(rows)
}

#[derive(Serialize)]
struct ScatterRow {
    image_id: String,
    pred: f64,
    mapped_pred: f64,
    mos: f64,
    condition: String,
}

fn eval_command(predictions: &Path, out_json: &Path, out_csv: Option<&Path>, image_level: bool) -> Result<()> {
    let mut rows = read_predictions(predictions)?;
    if image_level {
        let mut groups: indexmap::IndexMap<String, (f64, f64, usize)> = indexmap::IndexMap::new();
        for r in &rows {
            let g = groups.entry(r.image_id.clone()).or_insert((0.0, 0.0, 0));
            g.0 += r.pred;
            g.1 += r.mos;
            g.2 += 1;
        }
        rows = groups
            .into_iter()
            .map(|(image_id, (p, m, n))| PredictionRow { image_id, condition: String::new(), pred: p / n as f64, mos: m / n as f64 })
            .collect();
    }
    let pred: Vec<f64> = rows.iter().map(|r| r.pred).collect();
    let mos: Vec<f64> = rows.iter().map(|r| r.mos).collect();
    let conds: Option<Vec<ViewingCondition>> =
        rows.iter().map(|r| if r.condition.is_empty() { Ok(None) } else { r.condition.parse().map(Some) }).collect::<max360iq::Result<Option<Vec<_>>>>()?;
    let (report, mapped) = evaluate_mapped(&pred, &mos, conds.as_deref())?;
    let text = serde_json::to_string_pretty(&report)?;
    write_text(out_json, &text)?;
    if let Some(path) = out_csv {
        let scatter: Vec<ScatterRow> = rows
            .into_iter()
            .zip(mapped)
            .map(|(r, m)| ScatterRow { image_id: r.image_id, pred: r.pred, mapped_pred: m, mos: r.mos, condition: r.condition })
            .collect();
        write_csv(path, &scatter)?;
    }
    println!("{}", serde_json::json!({ "n": report.n, "plcc": report.plcc, "srcc": report.srcc, "rmse": report.rmse }));
    Ok(())
}

fn gradcheck(seeds: u64, only: &[String], corrupt: Option<f64>) -> Result<()> {
    if seeds == 0 {
        bail!(Error::Config("--seeds must be positive".into()));
    }
    let known: Vec<&str> = max360iq::gradsuite::cases().iter().map(|c| c.name).collect();
    if let Some(bad) = only.iter().find(|n| !known.contains(&n.as_str())) {
        bail!(Error::Config(format!("unknown gradient case `{bad}`; known: {}", known.join(", "))));
    }
    let names: Vec<&str> = only.iter().map(String::as_str).collect();
    let outcomes = run_suite(seeds, (!names.is_empty()).then_some(names.as_slice()), corrupt)?;
    let mut failed = Vec::new();
    for (name, tol, worst) in summarize(&outcomes) {
        let ok = outcomes.iter().filter(|o| o.name == name).all(|o| o.passed());
        println!("{name:<32} tol {tol:.0e}  worst {worst:.3e}  {}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(GradcheckFailed(failed.join(", ")).into())
    }
}

#[derive(Serialize)]
struct SweepRow {
    k: usize,
    plcc: f64,
    srcc: f64,
    rmse: f64,
    n: usize,
}

fn sweep_k<T: Scalar>(manifest: &Path, ks: &[usize], out: &Path, cfg: &RunConfig) -> Result<()> {
    if ks.contains(&0) {
        bail!(Error::Config("viewport counts must be positive".into()));
    }
    let ds = Dataset::load(manifest)?;
    let splits = split(&ds, cfg)?;
    let mut rows = Vec::new();
    for &k in ks {
        let extraction = ExtractionConfig { k, ..cfg.extraction };
        let train_set = samples::<T>(&splits.train, &extraction)?;
        let val_set = samples::<T>(&splits.val, &extraction)?;
        let test_set = samples::<T>(&splits.test, &extraction)?;
        let trainer = Trainer::<T>::new(&cfg.model, &cfg.train, &extraction)?;
        let outcome = train(trainer, &train_set, &val_set, &mut |_| Ok(()))?;
        let report = score(&outcome.best.store, &outcome.best.model, &test_set)?
            .ok_or_else(|| Error::Precondition { op: "sweep-k", detail: format!("test split has {} sequences; need at least 3", test_set.len()) })?;
        info!("k={k}: plcc {:.4} srcc {:.4}", report.plcc, report.srcc);
        rows.push(SweepRow { k, plcc: report.plcc, srcc: report.srcc, rmse: report.rmse, n: report.n });
    }
    write_csv(out, &rows)?;
    Ok(())
}
