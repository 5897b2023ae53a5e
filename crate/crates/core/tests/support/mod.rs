//! Shared oracles for the integration tests: central finite differences and
//! a brute-force re-implementation of the evaluation protocol built on full
//! enumeration plus a stable sort.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use sgf_core::metrics::ScenePrediction;
use sgf_core::world::WorldConfig;

pub mod gradcheck;
pub mod metric_check;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Central difference of `f` along coordinate `i` with step `h`.
pub fn central_difference(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, 1e-6)
}

pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Coordinates whose two step sizes disagree, i.e. the stencil straddles
    /// a kink (ReLU, max, abs). They carry no information about correctness.
    pub kinked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn assert_ok(&self, what: &str) {
        assert!(self.failures.is_empty(), "{what}: {:?}", self.failures);
        assert!(self.checked > 0, "{what}: nothing checked");
        assert!(
            self.kinked * 5 <= self.checked + self.kinked,
            "{what}: {} of {} coordinates sit on kinks",
            self.kinked,
            self.checked + self.kinked
        );
    }
}

/// Compares `analytic[i]` against central differences for every `i` in `coords`.
pub fn check_coords(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    coords: impl IntoIterator<Item = usize>,
) -> FdReport {
    let mut r = FdReport::default();
    for i in coords {
        let fd = central_difference(&mut f, x, i, FD_STEP);
        let fd_half = central_difference(&mut f, x, i, FD_STEP / 2.0);
        if rel_err_floor(fd, fd_half, 1e-4) > FD_TOL / 10.0 {
            r.kinked += 1;
            continue;
        }
        let e = rel_err(fd, analytic[i]);
        r.checked += 1;
        r.worst = r.worst.max(e);
        if e > FD_TOL {
            r.failures.push(format!("coord {i}: fd {fd:.10e} vs analytic {:.10e}", analytic[i]));
        }
    }
    r
}

pub fn check_all(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> FdReport {
    check_coords(f, x, analytic, 0..x.len())
}

pub fn random_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Small world used by tests that need real scenes.
pub fn tiny_world(seed: u64) -> WorldConfig {
    WorldConfig {
        seed,
        n_train: 6,
        n_validation: 2,
        k_min: 3,
        k_max: 4,
        n_obj: 6,
        n_rel: 13,
        d_emb: 8,
        d_vis: 12,
        points_per_instance: 16,
        ..WorldConfig::default()
    }
}

// ---- brute-force metric oracle ---------------------------------------------

/// Ordered pairs `(i, j)`, `i != j`, subject-major.
pub fn pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j))).collect()
}

fn edge_row(s: &ScenePrediction, i: usize, j: usize) -> &[f64] {
    let e = pairs(s.k()).iter().position(|&p| p == (i, j)).expect("pair exists");
    &s.predicate_probs[e]
}

/// Position of `target` after a stable descending sort of the full list.
/// Ties keep list order, so callers enumerate candidates in tie-break order.
fn sorted_position<T: PartialEq + Copy>(cands: &[(f64, T)], target: T) -> usize {
    let mut v = cands.to_vec();
    v.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    v.iter().position(|c| c.1 == target).expect("target enumerated")
}

pub fn class_rank(scores: &[f64], target: usize) -> usize {
    let cands: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
    sorted_position(&cands, target)
}

pub fn triplet_rank(s: &ScenePrediction, (i, p, j): (usize, usize, usize)) -> usize {
    let (ps, po, pp) = (&s.object_probs[i], &s.object_probs[j], edge_row(s, i, j));
    let mut cands = Vec::new();
    for a in 0..ps.len() {
        for q in 0..pp.len() {
            for b in 0..po.len() {
                cands.push((ps[a] * pp[q] * po[b], (a, q, b)));
            }
        }
    }
    sorted_position(&cands, (s.gt_objects[i], p, s.gt_objects[j]))
}

fn top1(row: &[f64]) -> usize {
    class_rank_inverse(row)
}

/// Index placed first by the stable descending sort.
fn class_rank_inverse(row: &[f64]) -> usize {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite"));
    idx[0]
}

/// Per gt relation: `Some(position)` in the scene's ranked candidate list or
/// `None` when its labels are wrong / its candidate was dropped.
pub fn recall_positions(s: &ScenePrediction, predcls: bool, constraint: bool) -> Vec<Option<usize>> {
    let k = s.k();
    let labels: Vec<(usize, f64)> = (0..k)
        .map(|i| {
            if predcls {
                (s.gt_objects[i], 1.0)
            } else {
                let c = top1(&s.object_probs[i]);
                (c, s.object_probs[i][c])
            }
        })
        .collect();
    let mut cands: Vec<(f64, (usize, usize, usize))> = Vec::new();
    for (i, j) in pairs(k) {
        let row = edge_row(s, i, j);
        let keep: Vec<usize> = if constraint { vec![top1(row)] } else { (0..row.len()).collect() };
        for p in keep {
            cands.push((labels[i].1 * row[p] * labels[j].1, (i, p, j)));
        }
    }
    s.gt_relations
        .iter()
        .map(|&(i, p, j)| {
            if labels[i].0 != s.gt_objects[i] || labels[j].0 != s.gt_objects[j] {
                return None;
            }
            cands.iter().any(|c| c.1 == (i, p, j)).then(|| sorted_position(&cands, (i, p, j)))
        })
        .collect()
}

fn ratio(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| hits as f64 / n as f64)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Micro accuracy and per-class mean accuracy (over classes present, or over
/// `restrict ∩ present`) of `(class, hit)` records.
pub fn acc_and_mean(records: &[(usize, bool)], restrict: Option<&BTreeSet<usize>>) -> (Option<f64>, Option<f64>) {
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(c, h) in records {
        let e = per.entry(c).or_default();
        e.0 += h as usize;
        e.1 += 1;
    }
    let micro = ratio(records.iter().filter(|r| r.1).count(), records.len());
    let per_class: Vec<f64> = per
        .iter()
        .filter(|(c, _)| restrict.map_or(true, |r| r.contains(c)))
        .map(|(_, &(h, n))| h as f64 / n as f64)
        .collect();
    (micro, mean(&per_class))
}

/// Recall (macro over scenes with relations) and pooled mean recall at `k`.
pub fn recall_at(scenes: &[ScenePrediction], predcls: bool, constraint: bool, k: usize) -> (Option<f64>, Option<f64>) {
    let mut per_scene = Vec::new();
    let mut pooled = Vec::new();
    for s in scenes.iter().filter(|s| !s.gt_relations.is_empty()) {
        let pos = recall_positions(s, predcls, constraint);
        let hits: Vec<(usize, bool)> = s
            .gt_relations
            .iter()
            .zip(&pos)
            .map(|(&(_, p, _), r)| (p, r.is_some_and(|r| r < k)))
            .collect();
        per_scene.push(hits.iter().filter(|h| h.1).count() as f64 / hits.len() as f64);
        pooled.extend(hits);
    }
    (mean(&per_scene), acc_and_mean(&pooled, None).1)
}

/// Random dump scene with a deliberately coarse probability grid so that
/// ties are common.
pub fn random_scene<R: Rng>(rng: &mut R, id: usize, n_obj: usize, n_rel: usize, k_max: usize) -> ScenePrediction {
    let k = rng.gen_range(1..=k_max);
    let object_probs: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let w: Vec<f64> = (0..n_obj).map(|_| rng.gen_range(0..4) as f64).collect();
            let total: f64 = w.iter().sum();
            if total == 0.0 {
                vec![1.0 / n_obj as f64; n_obj]
            } else {
                w.iter().map(|v| v / total).collect()
            }
        })
        .collect();
    let predicate_probs: Vec<Vec<f64>> = (0..k * (k - 1))
        .map(|_| (0..n_rel).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect())
        .collect();
    let gt_objects: Vec<usize> = (0..k).map(|_| rng.gen_range(0..n_obj)).collect();
    let mut gt_relations = BTreeSet::new();
    if k >= 2 {
        for _ in 0..rng.gen_range(0..=k) {
            let (i, j) = pairs(k)[rng.gen_range(0..k * (k - 1))];
            gt_relations.insert((i, rng.gen_range(0..n_rel), j));
        }
    }
    ScenePrediction {
        scene_id: format!("s{id}"),
        object_probs,
        predicate_probs,
        gt_objects,
        gt_relations: gt_relations.into_iter().collect(),
    }
}
