//! Every metric of `evaluate` against a brute-force enumeration oracle on
//! random tiny dumps with frequent score ties.

mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgf_core::metrics::{EvalConfig, TripletPool};
use support::metric_check::{check_against_oracle, random_dump, small_ks, K_MAX, N_OBJ, N_REL};
use support::{random_scene, triplet_rank};

#[test]
fn evaluate_matches_brute_force_on_random_dumps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..250 {
        let (scenes, seen) = random_dump(&mut rng);
        check_against_oracle(&scenes, &small_ks(), &seen);
    }
}

#[test]
fn default_cutoffs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..40 {
        let (scenes, seen) = random_dump(&mut rng);
        check_against_oracle(&scenes, &EvalConfig::default(), &seen);
    }
}

#[test]
fn scene_global_pool_never_ranks_better_than_pair_local() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let s = random_scene(&mut rng, 0, N_OBJ, N_REL, K_MAX);
        for &rel in &s.gt_relations {
            let local = sgf_core::metrics::triplet_rank(&s, rel, TripletPool::PairLocal);
            let global = sgf_core::metrics::triplet_rank(&s, rel, TripletPool::SceneGlobal);
            assert_eq!(local, triplet_rank(&s, rel));
            assert!(global >= local);
        }
    }
}
