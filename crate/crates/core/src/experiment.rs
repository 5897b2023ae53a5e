//! End-to-end pipeline steps shared by the command line tool:
//! generate → train → predict → eval, and the baseline-vs-joint comparison.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, DumpHeader, EvalContext, EvalReport, PredictionDump, ScenePrediction};
use crate::reasoning::{Mode, ModelDims, SceneGraphModel};
use crate::scene::SceneGraphSample;
use crate::tensor::Tape;
use crate::train::{Checkpoint, EpochLog, Trainer};
use crate::world::{generate_dataset, load_dataset, read_manifest, write_dataset, DatasetManifest};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    cfg.world.validate()?;
    let data = generate_dataset(&cfg.world)?;
    let manifest = write_dataset(out, &data)?;
    log::info!(
        "generated {} train / {} validation scenes into {}",
        data.train.len(),
        data.validation.len(),
        out.display()
    );
    Ok(manifest)
}

pub fn model_dims(manifest: &DatasetManifest) -> ModelDims {
    let c = &manifest.config;
    ModelDims {
        n_obj: c.n_obj,
        n_rel: c.n_rel,
        d_vis: c.d_vis,
        d_emb: c.d_emb,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: Vec<EpochLog>,
}

/// Trains on `data_dir` and writes the checkpoint and JSON-lines log into
/// `out`. With `resume`, continues from that checkpoint using its own
/// config echo and appends to the log.
pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let data = load_dataset(data_dir, cfg.strict)?;
    let manifest = &data.manifest;
    let provider = manifest.provider()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (mut trainer, run_cfg) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.vocab_hash != manifest.vocab_hash {
                return Err(Error::Data("checkpoint vocabulary does not match the dataset".into()));
            }
            let (model, opt) = ck.restore()?;
            // everything but the epoch budget comes from the checkpoint
            let mut run_cfg = ck.config.clone();
            run_cfg.train.epochs = cfg.train.epochs;
            let t = Trainer::resume(model, opt, ck.epoch, &data.train, &provider, run_cfg.train.clone())?;
            (t, run_cfg)
        }
        None => {
            cfg.validate()?;
            let model = SceneGraphModel::new(cfg.model.clone(), model_dims(manifest))?;
            (Trainer::new(model, &data.train, &provider, cfg.train.clone())?, cfg.clone())
        }
    };
    let log_path = out.join(TRAIN_LOG_FILE);
    let ck_path = out.join(CHECKPOINT_FILE);
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let vocab_hash = manifest.vocab_hash.clone();
    let logs = trainer.run(|t, log| {
        writeln!(log_file, "{}", serde_json::to_string(log)?).map_err(|e| Error::io(&log_path, e))?;
        Checkpoint::capture(&t.model, &t.optimizer, t.epoch, &run_cfg, &vocab_hash).save(&ck_path)
    })?;
    if logs.is_empty() {
        // nothing left to run; still leave a checkpoint behind
        Checkpoint::capture(&trainer.model, &trainer.optimizer, trainer.epoch, &run_cfg, &vocab_hash).save(&ck_path)?;
    }
    Ok(TrainSummary {
        checkpoint: ck_path,
        log: logs,
    })
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// 3D-only forward on every scene; softmax object and sigmoid predicate probabilities.
pub fn predict(model: &SceneGraphModel, scenes: &[SceneGraphSample], header: DumpHeader) -> Result<PredictionDump> {
    let scenes: Vec<ScenePrediction> = scenes
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, s, Mode::ThreeDOnly)?;
            let obj = tape.value(out.threed.object_logits);
            let object_probs = (0..obj.rows()).map(|r| softmax_row(obj.row_slice(r))).collect();
            let predicate_probs = match out.threed.predicate_logits {
                Some(p) => {
                    let p = tape.value(p);
                    (0..p.rows())
                        .map(|r| p.row_slice(r).iter().map(|&x| crate::tensor::sigmoid(x)).collect())
                        .collect()
                }
                None => Vec::new(),
            };
            Ok(ScenePrediction {
                scene_id: s.scene_id.clone(),
                object_probs,
                predicate_probs,
                gt_objects: s.object_labels(),
                gt_relations: s.predicates.relations(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(PredictionDump { header, scenes })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Validation,
}

pub fn predict_from_checkpoint(
    checkpoint: &Path,
    data_dir: &Path,
    split: SplitChoice,
    strict: bool,
    label: &str,
) -> Result<PredictionDump> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = load_dataset(data_dir, strict)?;
    if ck.vocab_hash != data.manifest.vocab_hash {
        return Err(Error::Data("checkpoint vocabulary does not match the dataset".into()));
    }
    let (model, _) = ck.restore()?;
    let header = DumpHeader {
        tool_version: crate::TOOL_VERSION.to_owned(),
        config_hash: ck.config_hash.clone(),
        vocab_hash: ck.vocab_hash.clone(),
        n_obj: ck.dims.n_obj,
        n_rel: ck.dims.n_rel,
        label: label.to_owned(),
    };
    let scenes = match split {
        SplitChoice::Train => &data.train,
        SplitChoice::Validation => &data.validation,
    };
    predict(&model, scenes, header)
}

/// Evaluates a dump against a dataset manifest (vocabulary must match).
pub fn evaluate_dump(dump: &PredictionDump, manifest: &DatasetManifest, cfg: &RunConfig) -> Result<EvalReport> {
    if dump.header.vocab_hash != manifest.vocab_hash {
        return Err(Error::Data(format!(
            "dump vocabulary hash {} does not match manifest {}",
            dump.header.vocab_hash, manifest.vocab_hash
        )));
    }
    let ctx = EvalContext {
        splits: Some(&manifest.splits),
        train_triplets: Some(&manifest.train_triplets),
    };
    evaluate(dump, &cfg.eval, ctx)
}

pub fn eval_files(dump_path: &Path, data_dir: &Path, cfg: &RunConfig) -> Result<EvalReport> {
    let dump = PredictionDump::read(dump_path)?;
    let manifest = read_manifest(data_dir)?;
    evaluate_dump(&dump, &manifest, cfg)
}

/// Headline metrics of one trained model on one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    /// `None` on the per-model mean rows.
    pub seed: Option<u64>,
    pub model: String,
    pub metrics: BTreeMap<String, Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool_version: String,
    pub config_hash: String,
    pub rows: Vec<ComparisonRow>,
    /// Mean over seeds per model.
    pub means: Vec<ComparisonRow>,
    pub tail_ma1_delta: Option<f64>,
    pub unseen_a50_delta: Option<f64>,
}

pub const TAIL_MA1: &str = "predicate_mA@1/tail";
pub const UNSEEN_A50: &str = "triplet_A@50/unseen";

fn metric_key(e: &crate::metrics::MetricEntry) -> String {
    let mut key = format!("{}@{}", e.metric, e.k);
    if e.split != "all" {
        key = format!("{key}/{}", e.split);
    }
    if e.constraint != "-" {
        key = format!("{key}/{}", e.constraint);
    }
    key
}

pub fn report_row(seed: u64, model: &str, report: &EvalReport) -> ComparisonRow {
    ComparisonRow {
        seed: Some(seed),
        model: model.to_owned(),
        metrics: report.entries.iter().map(|e| (metric_key(e), e.value)).collect(),
    }
}

fn mean_rows(rows: &[ComparisonRow], model: &str) -> ComparisonRow {
    let mine: Vec<_> = rows.iter().filter(|r| r.model == model).collect();
    let mut metrics = BTreeMap::new();
    if let Some(first) = mine.first() {
        for key in first.metrics.keys() {
            let vals: Vec<f64> = mine.iter().filter_map(|r| r.metrics.get(key).copied().flatten()).collect();
            // a mean is only reported when every seed defines the metric
            let v = (vals.len() == mine.len()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
            metrics.insert(key.clone(), v);
        }
    }
    ComparisonRow {
        seed: None,
        model: model.to_owned(),
        metrics,
    }
}

impl ExperimentReport {
    pub fn from_rows(config_hash: String, rows: Vec<ComparisonRow>) -> Self {
        let means = vec![mean_rows(&rows, "baseline"), mean_rows(&rows, "vlsat")];
        let delta = |key: &str| -> Option<f64> {
            let b = means[0].metrics.get(key).copied().flatten()?;
            let v = means[1].metrics.get(key).copied().flatten()?;
            Some(v - b)
        };
        Self {
            tool_version: crate::TOOL_VERSION.to_owned(),
            tail_ma1_delta: delta(TAIL_MA1),
            unseen_a50_delta: delta(UNSEEN_A50),
            config_hash,
            rows,
            means,
        }
    }

    /// Wide CSV: one row per (seed, model) plus mean rows, one column per metric.
    pub fn to_csv(&self) -> String {
        let keys: Vec<&String> = self.rows.first().map(|r| r.metrics.keys().collect()).unwrap_or_default();
        let mut out = String::from("seed,model");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for r in self.rows.iter().chain(&self.means) {
            let seed = r.seed.map_or_else(|| "mean".to_owned(), |s| s.to_string());
            out.push_str(&format!("{seed},{}", r.model));
            for k in &keys {
                out.push(',');
                if let Some(Some(v)) = r.metrics.get(*k) {
                    out.push_str(&format!("{v:.4}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Runs generate → train (baseline and joint) → predict → eval for
/// `cfg.experiment_seeds` consecutive seeds under `out`.
pub fn run_experiment(cfg: &RunConfig, out: &Path) -> Result<ExperimentReport> {
    cfg.validate()?;
    if cfg.experiment_seeds == 0 {
        return Err(Error::Config("experiment_seeds must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for s in 0..cfg.experiment_seeds as u64 {
        let seed = cfg.world.seed + s;
        let mut run = cfg.clone();
        run.world.seed = seed;
        run.model.init_seed = cfg.model.init_seed + s;
        run.train.seed = cfg.train.seed + s;
        let dir = out.join(format!("seed_{seed}"));
        let data_dir = dir.join("data");
        generate(&run, &data_dir)?;
        let manifest = read_manifest(&data_dir)?;
        for (label, vlsat) in [("baseline", false), ("vlsat", true)] {
            let mut rc = run.clone();
            rc.train.vlsat = vlsat;
            let model_dir = dir.join(label);
            log::info!("seed {seed}: training {label}");
            let summary = train(&rc, &data_dir, &model_dir, None)?;
            let dump = predict_from_checkpoint(&summary.checkpoint, &data_dir, SplitChoice::Validation, rc.strict, label)?;
            dump.write(model_dir.join("predictions.jsonl"))?;
            let report = evaluate_dump(&dump, &manifest, &rc)?;
            report.write(&model_dir, "eval")?;
            rows.push(report_row(seed, label, &report));
        }
    }
    let report = ExperimentReport::from_rows(cfg.hash(), rows);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = out.join("comparison.json");
    fs::write(&json, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&json, e))?;
    let csv = out.join("comparison.csv");
    fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    Ok(report)
}
