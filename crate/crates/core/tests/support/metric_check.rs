//! Compares every entry of an `EvalReport` with the brute-force oracle on
//! random tiny dumps (K ≤ 5, six object classes, four predicates).

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sgf_core::metrics::{evaluate, DumpHeader, EvalConfig, EvalContext, EvalReport, PredictionDump, ScenePrediction};
use sgf_core::scene::PredicateSplits;

use super::{acc_and_mean, class_rank, random_scene, recall_at, triplet_rank};

pub const N_OBJ: usize = 6;
pub const N_REL: usize = 4;
pub const K_MAX: usize = 5;

pub fn dump(scenes: Vec<ScenePrediction>) -> PredictionDump {
    PredictionDump {
        header: DumpHeader {
            tool_version: "test".into(),
            config_hash: "c".into(),
            vocab_hash: "v".into(),
            n_obj: N_OBJ,
            n_rel: N_REL,
            label: "random".into(),
        },
        scenes,
    }
}

pub fn small_ks() -> EvalConfig {
    EvalConfig {
        object_k: vec![1, 2, 3],
        predicate_k: vec![1, 2, 4],
        triplet_k: vec![1, 5, 20, 100],
        recall_k: vec![1, 3, 10],
        ..EvalConfig::default()
    }
}

pub fn splits() -> PredicateSplits {
    PredicateSplits {
        head: [0, 1].into(),
        body: [2].into(),
        tail: [3].into(),
    }
}

fn pct(v: Option<f64>) -> Option<f64> {
    v.map(|x| x * 100.0)
}

fn assert_close(report: &EvalReport, metric: &str, k: usize, split: &str, constraint: &str, want: Option<f64>) {
    let got = report.get(metric, k, split, constraint);
    match (got, pct(want)) {
        (None, None) => {}
        (Some(g), Some(w)) => assert!((g - w).abs() < 1e-9, "{metric}@{k}/{split}/{constraint}: {g} vs oracle {w}"),
        (g, w) => panic!("{metric}@{k}/{split}/{constraint}: {g:?} vs oracle {w:?}"),
    }
}

pub fn check_against_oracle(scenes: &[ScenePrediction], cfg: &EvalConfig, seen: &BTreeSet<(usize, usize, usize)>) {
    let sp = splits();
    let d = dump(scenes.to_vec());
    let report = evaluate(
        &d,
        cfg,
        EvalContext {
            splits: Some(&sp),
            train_triplets: Some(seen),
        },
    )
    .unwrap();

    let objects: Vec<(&[f64], usize)> = scenes
        .iter()
        .flat_map(|s| s.object_probs.iter().map(Vec::as_slice).zip(s.gt_objects.iter().copied()))
        .collect();
    for &k in &cfg.object_k {
        let rec: Vec<(usize, bool)> = objects.iter().map(|&(r, c)| (c, class_rank(r, c) < k)).collect();
        assert_close(&report, "object_A", k, "all", "-", acc_and_mean(&rec, None).0);
    }

    let preds: Vec<(&[f64], usize)> = scenes
        .iter()
        .flat_map(|s| {
            s.gt_relations.iter().map(move |&(i, p, j)| {
                let e = super::pairs(s.k()).iter().position(|&q| q == (i, j)).unwrap();
                (s.predicate_probs[e].as_slice(), p)
            })
        })
        .collect();
    for &k in &cfg.predicate_k {
        let rec: Vec<(usize, bool)> = preds.iter().map(|&(r, p)| (p, class_rank(r, p) < k)).collect();
        let (a, ma) = acc_and_mean(&rec, None);
        assert_close(&report, "predicate_A", k, "all", "-", a);
        assert_close(&report, "predicate_mA", k, "all", "-", ma);
        for (name, set) in sp.named() {
            assert_close(&report, "predicate_mA", k, name, "-", acc_and_mean(&rec, Some(set)).1);
        }
    }

    let triplets: Vec<((usize, usize, usize), usize)> = scenes
        .iter()
        .flat_map(|s| {
            s.gt_relations
                .iter()
                .map(move |&(i, p, j)| ((s.gt_objects[i], p, s.gt_objects[j]), triplet_rank(s, (i, p, j))))
        })
        .collect();
    for &k in &cfg.triplet_k {
        let rec = |filter: &dyn Fn(&(usize, usize, usize)) -> bool| -> Vec<(usize, bool)> {
            triplets.iter().filter(|(t, _)| filter(t)).map(|&(t, r)| (t.1, r < k)).collect()
        };
        let (a, ma) = acc_and_mean(&rec(&|_| true), None);
        assert_close(&report, "triplet_A", k, "all", "-", a);
        assert_close(&report, "triplet_mA", k, "all", "-", ma);
        assert_close(&report, "triplet_A", k, "seen", "-", acc_and_mean(&rec(&|t| seen.contains(t)), None).0);
        assert_close(&report, "triplet_A", k, "unseen", "-", acc_and_mean(&rec(&|t| !seen.contains(t)), None).0);
    }

    for (task, predcls) in [("sgcls", false), ("predcls", true)] {
        for (tag, constraint) in [("with", true), ("without", false)] {
            for &k in &cfg.recall_k {
                let (r, mr) = recall_at(scenes, predcls, constraint, k);
                assert_close(&report, &format!("{task}_R"), k, "all", tag, r);
                assert_close(&report, &format!("{task}_mR"), k, "all", tag, mr);
            }
        }
    }
}

pub fn random_dump(rng: &mut ChaCha8Rng) -> (Vec<ScenePrediction>, BTreeSet<(usize, usize, usize)>) {
    let n = rng.gen_range(1..=4);
    let scenes: Vec<_> = (0..n).map(|i| random_scene(rng, i, N_OBJ, N_REL, K_MAX)).collect();
    let mut seen = BTreeSet::new();
    for _ in 0..rng.gen_range(0..12) {
        seen.insert((rng.gen_range(0..N_OBJ), rng.gen_range(0..N_REL), rng.gen_range(0..N_OBJ)));
    }
    (scenes, seen)
}
