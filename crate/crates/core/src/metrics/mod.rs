//! Evaluation protocol: object/predicate/triplet top-k accuracy, scene-level
//! recall with and without graph constraint, head/body/tail and
//! seen/unseen breakdowns.
//!
//! All functions are pure; ties are broken by ascending index so results are
//! reproducible bit for bit.

mod dump;
mod ranking;

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dump::{DumpHeader, PredictionDump, ScenePrediction, ROW_SUM_TOL};
pub use ranking::{
    argmax, class_rank, mean_topk_accuracy, recall_at_k, recall_positions, tally_topk, topk_accuracy,
    triplet_rank, ClassTally, MeanRecallMode, Task, TripletPool,
};

use crate::error::{Error, Result};
use crate::scene::PredicateSplits;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub object_k: Vec<usize>,
    pub predicate_k: Vec<usize>,
    pub triplet_k: Vec<usize>,
    pub recall_k: Vec<usize>,
    pub mean_recall: MeanRecallMode,
    pub triplet_pool: TripletPool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            object_k: vec![1, 5, 10],
            predicate_k: vec![1, 3, 5],
            triplet_k: vec![50, 100],
            recall_k: vec![20, 50, 100],
            mean_recall: MeanRecallMode::Pooled,
            triplet_pool: TripletPool::PairLocal,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, ks) in [
            ("object_k", &self.object_k),
            ("predicate_k", &self.predicate_k),
            ("triplet_k", &self.triplet_k),
            ("recall_k", &self.recall_k),
        ] {
            if ks.iter().any(|&k| k == 0) {
                return Err(Error::Config(format!("{name} values must be >= 1")));
            }
        }
        Ok(())
    }
}

/// One metric value, stored as a percentage. `None` means undefined (e.g.
/// no ground truth in that bucket), which is different from 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    pub k: usize,
    pub value: Option<f64>,
    pub split: String,
    pub constraint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub config_hash: String,
    pub vocab_hash: String,
    pub label: String,
    pub n_scenes: usize,
    pub eval: EvalConfig,
    pub entries: Vec<MetricEntry>,
}

impl EvalReport {
    /// Looks up a value (percentage).
    pub fn get(&self, metric: &str, k: usize, split: &str, constraint: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.metric == metric && e.k == k && e.split == split && e.constraint == constraint)
            .and_then(|e| e.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,k,value,split,constraint\n");
        for e in &self.entries {
            let v = e.value.map(|v| format!("{v}")).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", e.metric, e.k, v, e.split, e.constraint));
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// Optional dataset-level inputs to the breakdowns.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalContext<'a> {
    pub splits: Option<&'a PredicateSplits>,
    pub train_triplets: Option<&'a BTreeSet<(usize, usize, usize)>>,
}

/// Predicate rows for every gt relation, labelled with its predicate.
pub fn predicate_items(scenes: &[ScenePrediction]) -> Vec<(&[f64], usize)> {
    scenes
        .iter()
        .flat_map(|s| s.gt_relations.iter().map(move |&(i, p, j)| (s.edge(i, j), p)))
        .collect()
}

/// Triplet ranks for every gt relation, with its class triple.
pub fn triplet_ranks(scenes: &[ScenePrediction], pool: TripletPool) -> Vec<((usize, usize, usize), usize)> {
    scenes
        .par_iter()
        .map(|s| {
            s.gt_relations
                .iter()
                .map(|&rel| {
                    let (i, p, j) = rel;
                    ((s.gt_objects[i], p, s.gt_objects[j]), triplet_rank(s, rel, pool))
                })
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// A@k and mA@k (over predicate classes) of triplet ranks.
pub fn triplet_topk(
    ranks: &[((usize, usize, usize), usize)],
    n_rel: usize,
    k: usize,
) -> (Option<f64>, Option<f64>) {
    let mut t = ClassTally::new(n_rel);
    for &((_, p, _), r) in ranks {
        t.record(p, r < k);
    }
    (t.accuracy(), t.mean_accuracy(None))
}

pub fn evaluate(dump: &PredictionDump, cfg: &EvalConfig, ctx: EvalContext<'_>) -> Result<EvalReport> {
    cfg.validate()?;
    dump.validate()?;
    let n_rel = dump.header.n_rel;
    let scenes = &dump.scenes;
    let mut entries = Vec::new();
    let mut push = |metric: &str, k: usize, value: Option<f64>, split: &str, constraint: &str| {
        entries.push(MetricEntry {
            metric: metric.to_owned(),
            k,
            value: value.map(|v| v * 100.0),
            split: split.to_owned(),
            constraint: constraint.to_owned(),
        });
    };

    let obj_rows: Vec<Vec<f64>> = scenes.iter().flat_map(|s| s.object_probs.iter().cloned()).collect();
    let obj_gt: Vec<usize> = scenes.iter().flat_map(|s| s.gt_objects.iter().copied()).collect();
    for &k in &cfg.object_k {
        push("object_A", k, topk_accuracy(&obj_rows, &obj_gt, k), "all", "-");
    }

    let items = predicate_items(scenes);
    for &k in &cfg.predicate_k {
        let t = tally_topk(&items, n_rel, k);
        push("predicate_A", k, t.accuracy(), "all", "-");
        push("predicate_mA", k, t.mean_accuracy(None), "all", "-");
        if let Some(splits) = ctx.splits {
            for (name, set) in splits.named() {
                push("predicate_mA", k, t.mean_accuracy(Some(set)), name, "-");
            }
        }
    }

    let ranks = triplet_ranks(scenes, cfg.triplet_pool);
    for &k in &cfg.triplet_k {
        let (a, ma) = triplet_topk(&ranks, n_rel, k);
        push("triplet_A", k, a, "all", "-");
        push("triplet_mA", k, ma, "all", "-");
        if let Some(seen) = ctx.train_triplets {
            let (s, u): (Vec<_>, Vec<_>) = ranks.iter().partition(|(t, _)| seen.contains(t));
            push("triplet_A", k, triplet_topk(&s, n_rel, k).0, "seen", "-");
            push("triplet_A", k, triplet_topk(&u, n_rel, k).0, "unseen", "-");
        }
    }

    for task in [Task::SgCls, Task::PredCls] {
        for constraint in [true, false] {
            let pos: Vec<_> = scenes.par_iter().map(|s| recall_positions(s, task, constraint)).collect();
            let tag = if constraint { "with" } else { "without" };
            for &k in &cfg.recall_k {
                let (r, mr) = recall_at_k(scenes, &pos, n_rel, k, cfg.mean_recall);
                push(&format!("{}_R", task.as_str()), k, r, "all", tag);
                push(&format!("{}_mR", task.as_str()), k, mr, "all", tag);
            }
        }
    }

    Ok(EvalReport {
        tool_version: crate::TOOL_VERSION.to_owned(),
        config_hash: dump.header.config_hash.clone(),
        vocab_hash: dump.header.vocab_hash.clone(),
        label: dump.header.label.clone(),
        n_scenes: scenes.len(),
        eval: cfg.clone(),
        entries,
    })
}
