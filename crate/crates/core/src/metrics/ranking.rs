//! Rank-based metrics. Ties are always broken by ascending index.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::dump::ScenePrediction;
use crate::scene::{edge_index, edge_pairs};

/// Zero-based rank of `target` in `scores` (higher first, ties by index).
pub fn class_rank(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(c, &s)| s > t || (s == t && c < target))
        .count()
}

/// Top-1 class, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (c, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = c;
        }
    }
    best
}

/// Fraction of rows whose gt label ranks within the top `k`; `None` for no rows.
pub fn topk_accuracy(scores: &[Vec<f64>], gt: &[usize], k: usize) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let hits = scores.iter().zip(gt).filter(|(s, &g)| class_rank(s, g) < k).count();
    Some(hits as f64 / scores.len() as f64)
}

/// Per-class hit and occurrence counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassTally {
    pub hits: Vec<u64>,
    pub counts: Vec<u64>,
}

impl ClassTally {
    pub fn new(n: usize) -> Self {
        Self {
            hits: vec![0; n],
            counts: vec![0; n],
        }
    }

    pub fn record(&mut self, class: usize, hit: bool) {
        self.counts[class] += 1;
        self.hits[class] += u64::from(hit);
    }

    pub fn class_accuracy(&self, c: usize) -> Option<f64> {
        (self.counts[c] > 0).then(|| self.hits[c] as f64 / self.counts[c] as f64)
    }

    /// Overall fraction of hits.
    pub fn accuracy(&self) -> Option<f64> {
        let n: u64 = self.counts.iter().sum();
        (n > 0).then(|| self.hits.iter().sum::<u64>() as f64 / n as f64)
    }

    /// Unweighted mean over classes (optionally restricted) with at least one occurrence.
    pub fn mean_accuracy(&self, classes: Option<&BTreeSet<usize>>) -> Option<f64> {
        let vals: Vec<f64> = (0..self.counts.len())
            .filter(|c| classes.map_or(true, |s| s.contains(c)))
            .filter_map(|c| self.class_accuracy(c))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Per-class top-k tally over labelled rows; a multi-label row appears once per label.
pub fn tally_topk(items: &[(&[f64], usize)], n_classes: usize, k: usize) -> ClassTally {
    let mut t = ClassTally::new(n_classes);
    for (scores, c) in items {
        t.record(*c, class_rank(scores, *c) < k);
    }
    t
}

/// Unweighted mean over present classes of per-class top-k accuracy.
pub fn mean_topk_accuracy(items: &[(&[f64], usize)], n_classes: usize, k: usize) -> Option<f64> {
    tally_topk(items, n_classes, k).mean_accuracy(None)
}

/// Candidate pool used to rank a ground-truth triplet.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletPool {
    /// All `(s, p, o)` class triples of the relation's own pair.
    #[default]
    PairLocal,
    /// All class triples of every ordered pair in the scene.
    SceneGlobal,
}

#[inline]
fn triplet_score(ps: &[f64], pp: &[f64], po: &[f64], s: usize, p: usize, o: usize) -> f64 {
    ps[s] * pp[p] * po[o]
}

/// Number of candidates of pair `(i, j)` that outrank the target score,
/// where `before` says whether a tied candidate comes first.
fn count_better(
    scene: &ScenePrediction,
    i: usize,
    j: usize,
    g: f64,
    before: impl Fn(usize, usize, usize) -> bool,
) -> usize {
    let (ps, po) = (&scene.object_probs[i], &scene.object_probs[j]);
    let pp = scene.edge(i, j);
    let mut n = 0;
    for s in 0..ps.len() {
        for p in 0..pp.len() {
            for o in 0..po.len() {
                let v = triplet_score(ps, pp, po, s, p, o);
                if v > g || (v == g && before(s, p, o)) {
                    n += 1;
                }
            }
        }
    }
    n
}

/// Zero-based rank of ground-truth relation `(i, p, j)` among triplet candidates.
pub fn triplet_rank(scene: &ScenePrediction, rel: (usize, usize, usize), pool: TripletPool) -> usize {
    let (i, p, j) = rel;
    let (gs, go) = (scene.gt_objects[i], scene.gt_objects[j]);
    let g = triplet_score(&scene.object_probs[i], scene.edge(i, j), &scene.object_probs[j], gs, p, go);
    let key = (gs, p, go);
    match pool {
        TripletPool::PairLocal => count_better(scene, i, j, g, |s, q, o| (s, q, o) < key),
        TripletPool::SceneGlobal => {
            let k = scene.k();
            let own = edge_index(k, i, j);
            edge_pairs(k)
                .into_iter()
                .enumerate()
                .map(|(e, (a, b))| {
                    count_better(scene, a, b, g, |s, q, o| e < own || (e == own && (s, q, o) < key))
                })
                .sum()
        }
    }
}

/// Recall task: how subject/object labels are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Labels are the top-1 predicted classes, scored by their probability.
    SgCls,
    /// Labels are ground truth with score 1.
    PredCls,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::SgCls => "sgcls",
            Task::PredCls => "predcls",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanRecallMode {
    /// Per-class hits and counts pooled over all scenes.
    #[default]
    Pooled,
    /// Per-class recall averaged over the scenes where the class occurs.
    PerScene,
}

/// For each gt relation of a scene: whether it is retrievable (labels
/// correct and the candidate exists) and, if so, its zero-based position in
/// the scene's ranked candidate list.
pub fn recall_positions(scene: &ScenePrediction, task: Task, constraint: bool) -> Vec<Option<usize>> {
    let k = scene.k();
    let (labels, label_scores): (Vec<usize>, Vec<f64>) = match task {
        Task::SgCls => scene
            .object_probs
            .iter()
            .map(|r| {
                let c = argmax(r);
                (c, r[c])
            })
            .unzip(),
        Task::PredCls => (scene.gt_objects.clone(), vec![1.0; k]),
    };
    // candidate list: (score, edge, predicate)
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (e, (i, j)) in edge_pairs(k).into_iter().enumerate() {
        let row = &scene.predicate_probs[e];
        let preds: Vec<usize> = if constraint {
            vec![argmax(row)]
        } else {
            (0..row.len()).collect()
        };
        for p in preds {
            cands.push((label_scores[i] * row[p] * label_scores[j], e, p));
        }
    }
    scene
        .gt_relations
        .iter()
        .map(|&(i, p, j)| {
            if labels[i] != scene.gt_objects[i] || labels[j] != scene.gt_objects[j] {
                return None;
            }
            let e = edge_index(k, i, j);
            let &(g, _, _) = cands.iter().find(|c| c.1 == e && c.2 == p)?;
            Some(
                cands
                    .iter()
                    .filter(|&&(v, ce, cp)| v > g || (v == g && (ce, cp) < (e, p)))
                    .count(),
            )
        })
        .collect()
}

/// Recall and mean recall at `k` over scenes (macro average over scenes that
/// have at least one gt relation).
pub fn recall_at_k(
    scenes: &[ScenePrediction],
    positions: &[Vec<Option<usize>>],
    n_rel: usize,
    k: usize,
    mode: MeanRecallMode,
) -> (Option<f64>, Option<f64>) {
    let mut per_scene = Vec::new();
    let mut pooled = ClassTally::new(n_rel);
    let mut class_sums = vec![0.0; n_rel];
    let mut class_scenes = vec![0usize; n_rel];
    for (scene, pos) in scenes.iter().zip(positions) {
        if scene.gt_relations.is_empty() {
            continue;
        }
        let mut local = ClassTally::new(n_rel);
        for (&(_, p, _), r) in scene.gt_relations.iter().zip(pos) {
            let hit = r.is_some_and(|r| r < k);
            local.record(p, hit);
            pooled.record(p, hit);
        }
        per_scene.push(local.accuracy().expect("scene has relations"));
        for c in 0..n_rel {
            if let Some(a) = local.class_accuracy(c) {
                class_sums[c] += a;
                class_scenes[c] += 1;
            }
        }
    }
    let recall = (!per_scene.is_empty()).then(|| per_scene.iter().sum::<f64>() / per_scene.len() as f64);
    let mean_recall = match mode {
        MeanRecallMode::Pooled => pooled.mean_accuracy(None),
        MeanRecallMode::PerScene => {
            let v: Vec<f64> = (0..n_rel)
                .filter(|&c| class_scenes[c] > 0)
                .map(|c| class_sums[c] / class_scenes[c] as f64)
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    (recall, mean_recall)
}
