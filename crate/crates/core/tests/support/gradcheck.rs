//! Finite-difference gradient cases shared by the gradient tests and the
//! acceptance suite. Every case draws its inputs from `seed`, so running a
//! case over many seeds checks many random parameterizations.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgf_core::encoders::{NodeEncoder, VisualProjection};
use sgf_core::reasoning::{Attention, DistanceMask, FatGnn, ModelConfig, ModelDims, SceneGraphModel};
use sgf_core::scene::{compute_attributes, InstanceAttributes, Point, SceneInstance};
use sgf_core::tensor::Axis;
use sgf_core::train::{
    loss_node_init, loss_obj, loss_pred, loss_tri_emb, scene_gradients, scene_losses, total_loss, LossWeights,
    PreparedScene, TextTerm,
};
use sgf_core::world::{generate_dataset, GeneratedDataset};
use sgf_core::{ParamId, ParamStore, Tape, Tensor, Var};

use super::{check_all, check_coords, random_vec, tiny_world, FdReport};

pub type Case = fn(u64) -> FdReport;

impl FdReport {
    pub fn merge(&mut self, other: FdReport) {
        self.checked += other.checked;
        self.kinked += other.kinked;
        self.worst = self.worst.max(other.worst);
        self.failures.extend(other.failures);
    }
}

/// Runs `case` for seeds `0..n` and merges the reports.
pub fn over_seeds(case: Case, n: u64) -> FdReport {
    let mut r = FdReport::default();
    for seed in 0..n {
        let mut one = case(seed);
        for f in &mut one.failures {
            *f = format!("seed {seed}: {f}");
        }
        r.merge(one);
    }
    r
}

// ---- single ops ---------------------------------------------------------------

/// Checks `d/dx sum(op(x...) ⊙ w)` for a random `w`, over every input coordinate.
pub fn op_check(shapes: &[(usize, usize)], range: (f64, f64), seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Var) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = shapes.iter().map(|(r, c)| r * c).collect();
    let x: Vec<f64> = random_vec(&mut rng, sizes.iter().sum(), range.0, range.1);
    let split = |flat: &[f64]| -> Vec<Tensor> {
        let mut at = 0;
        shapes
            .iter()
            .zip(&sizes)
            .map(|(&(r, c), &n)| {
                let t = Tensor::matrix(r, c, flat[at..at + n].to_vec()).unwrap();
                at += n;
                t
            })
            .collect()
    };
    // the weighting tensor is drawn once, from the output shape of the first evaluation
    let probe = {
        let mut t = Tape::new();
        let vars: Vec<Var> = split(&x).into_iter().map(|v| t.input(v).unwrap()).collect();
        let out = build(&mut t, &vars);
        t.shape(out).to_vec()
    };
    let w = Tensor::new(probe.clone(), random_vec(&mut rng, probe.iter().product(), -1.0, 1.0)).unwrap();
    let scalar = |t: &mut Tape, out: Var| {
        let wv = t.constant(w.clone()).unwrap();
        let p = t.mul(out, wv).unwrap();
        t.sum(p).unwrap()
    };
    let f = |flat: &[f64]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = split(flat).into_iter().map(|v| t.constant(v).unwrap()).collect();
        let out = build(&mut t, &vars);
        let s = scalar(&mut t, out);
        t.value(s).item()
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = split(&x).into_iter().map(|v| t.input(v).unwrap()).collect();
    let out = build(&mut t, &vars);
    let s = scalar(&mut t, out);
    t.backward(s).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&sizes)
        .flat_map(|(&v, &n)| t.grad(v).map_or(vec![0.0; n], |g| g.data().to_vec()))
        .collect();
    check_all(f, &x, &analytic)
}

pub fn matmul(seed: u64) -> FdReport {
    op_check(&[(3, 4), (4, 2)], (-1.0, 1.0), seed, |t, v| t.matmul(v[0], v[1]).unwrap())
}

pub fn transpose_and_reshape(seed: u64) -> FdReport {
    op_check(&[(2, 3)], (-1.0, 1.0), seed, |t, v| {
        let a = t.transpose(v[0]).unwrap();
        t.reshape(a, &[1, 6]).unwrap()
    })
}

pub fn elementwise_binary(seed: u64) -> FdReport {
    let mut r = op_check(&[(2, 3), (2, 3)], (0.5, 2.0), seed, |t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let b = t.sub(a, v[1]).unwrap();
        let c = t.mul(b, v[1]).unwrap();
        t.div(c, v[0]).unwrap()
    });
    r.merge(op_check(&[(2, 3), (2, 3)], (0.5, 2.0), seed, |t, v| t.div(v[0], v[1]).unwrap()));
    r
}

pub fn add_row_scale_add_scalar(seed: u64) -> FdReport {
    op_check(&[(3, 4), (1, 4)], (-1.0, 1.0), seed, |t, v| {
        let a = t.add_row(v[0], v[1]).unwrap();
        let b = t.scale(a, -2.5).unwrap();
        t.add_scalar(b, 0.75).unwrap()
    })
}

pub fn unary_smooth(seed: u64) -> FdReport {
    let mut r = op_check(&[(2, 4)], (-2.0, 2.0), seed, |t, v| t.sigmoid(v[0]).unwrap());
    r.merge(op_check(&[(2, 4)], (-2.0, 2.0), seed, |t, v| t.exp(v[0]).unwrap()));
    r.merge(op_check(&[(2, 4)], (0.2, 3.0), seed, |t, v| t.ln(v[0]).unwrap()));
    r.merge(op_check(&[(2, 4)], (-3.0, 3.0), seed, |t, v| t.softplus(v[0]).unwrap()));
    r
}

pub fn unary_kinked(seed: u64) -> FdReport {
    let mut r = op_check(&[(3, 5)], (-1.0, 1.0), seed, |t, v| t.relu(v[0]).unwrap());
    r.merge(op_check(&[(3, 5)], (-1.0, 1.0), seed, |t, v| t.abs(v[0]).unwrap()));
    r
}

pub fn softmax_and_log_softmax(seed: u64) -> FdReport {
    let mut r = op_check(&[(3, 4)], (-2.0, 2.0), seed, |t, v| t.softmax(v[0], Axis::Cols).unwrap());
    r.merge(op_check(&[(3, 4)], (-2.0, 2.0), seed, |t, v| t.softmax(v[0], Axis::Rows).unwrap()));
    r.merge(op_check(&[(3, 4)], (-2.0, 2.0), seed, |t, v| t.log_softmax(v[0]).unwrap()));
    r
}

pub fn layer_norm(seed: u64) -> FdReport {
    op_check(&[(3, 6)], (-2.0, 2.0), seed, |t, v| t.layer_norm(v[0], 1e-5).unwrap())
}

pub fn structural(seed: u64) -> FdReport {
    let mut r = op_check(&[(2, 3), (2, 2)], (-1.0, 1.0), seed, |t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap());
    r.merge(op_check(&[(2, 3), (1, 3)], (-1.0, 1.0), seed, |t, v| t.concat_rows(&[v[1], v[0]]).unwrap()));
    r.merge(op_check(&[(3, 5)], (-1.0, 1.0), seed, |t, v| t.slice_cols(v[0], 1, 3).unwrap()));
    r.merge(op_check(&[(4, 2)], (-1.0, 1.0), seed, |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]).unwrap()));
    r
}

pub fn reductions(seed: u64) -> FdReport {
    let mut r = op_check(&[(3, 4)], (-1.0, 1.0), seed, |t, v| t.sum(v[0]).unwrap());
    r.merge(op_check(&[(3, 4)], (-1.0, 1.0), seed, |t, v| t.mean(v[0]).unwrap()));
    r.merge(op_check(&[(3, 4)], (-1.0, 1.0), seed, |t, v| t.sum_rows(v[0]).unwrap()));
    r.merge(op_check(&[(3, 4)], (-1.0, 1.0), seed, |t, v| t.row_sum(v[0]).unwrap()));
    r.merge(op_check(&[(5, 3)], (-1.0, 1.0), seed, |t, v| t.max_rows(v[0]).unwrap()));
    r
}

pub fn row_cosine(seed: u64) -> FdReport {
    op_check(&[(3, 4), (3, 4)], (-1.0, 1.0), seed, |t, v| t.row_cosine(v[0], v[1], 1e-12).unwrap())
}

pub fn loss_terms(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let mut r = op_check(&[(3, 5)], (-2.0, 2.0), seed, |t, v| loss_obj(t, v[0], &[4, 0, 2]).unwrap());
    let y = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
    r.merge(op_check(&[(2, 3)], (-2.0, 2.0), seed, move |t, v| loss_pred(t, v[0], &y).unwrap()));
    let terms: Vec<TextTerm> = [0, 2, 2]
        .into_iter()
        .map(|edge| TextTerm {
            edge,
            text: random_vec(&mut rng, 4, -0.5, 0.5),
        })
        .collect();
    r.merge(op_check(&[(3, 4)], (-1.0, 1.0), seed, move |t, v| loss_tri_emb(t, v[0], &terms).unwrap()));
    r.merge(op_check(&[(3, 4), (3, 4)], (-1.0, 1.0), seed, |t, v| loss_node_init(t, v[0], v[1]).unwrap()));
    r
}

/// Every differentiable tape op plus the loss terms.
pub const OP_CASES: &[(&str, Case)] = &[
    ("matmul", matmul),
    ("transpose/reshape", transpose_and_reshape),
    ("elementwise binary", elementwise_binary),
    ("add_row/scale/add_scalar", add_row_scale_add_scalar),
    ("smooth unary", unary_smooth),
    ("kinked unary", unary_kinked),
    ("softmax/log_softmax", softmax_and_log_softmax),
    ("layer_norm", layer_norm),
    ("structural", structural),
    ("reductions", reductions),
    ("row_cosine", row_cosine),
    ("loss terms", loss_terms),
];

// ---- parameterized layers -----------------------------------------------------

/// Moves every parameter off its initialization. Zero-initialized biases
/// put ReLU inputs exactly on the kink wherever an input row is zero (e.g.
/// the diagonal of the distance mask), where one-sided behaviour makes any
/// finite difference meaningless.
pub fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat: Vec<f64> = store.flatten().iter().map(|v| v + rng.gen_range(-0.1..0.1)).collect();
    store.set_flat(&flat).unwrap();
}

/// Checks gradients w.r.t. every coordinate of every parameter in `store`.
pub fn store_check(store: &ParamStore, seed: u64, build: impl Fn(&mut Tape, &ParamStore) -> Var) -> FdReport {
    let mut store = store.clone();
    jitter(&mut store, seed ^ 0x5eed);
    let store = &store;
    let x = store.flatten();
    let mut s2 = store.clone();
    let f = |flat: &[f64]| -> f64 {
        s2.set_flat(flat).unwrap();
        let mut t = Tape::new();
        let out = build(&mut t, &s2);
        t.value(out).item()
    };
    let mut t = Tape::new();
    let out = build(&mut t, store);
    t.backward(out).unwrap();
    let analytic = t.param_gradients(store).flatten(store);
    check_all(f, &x, &analytic)
}

/// Scalarizes a matrix output with fixed random weights.
pub fn weighted_sum(t: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = t.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(shape.clone(), random_vec(&mut rng, shape.iter().product(), -1.0, 1.0)).unwrap();
    let w = t.constant(w).unwrap();
    let p = t.mul(out, w).unwrap();
    t.sum(p).unwrap()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, center: [f64; 3]) -> Vec<Point> {
    (0..n)
        .map(|_| [0, 1, 2].map(|a| center[a] + rng.gen_range(-0.8..0.8)))
        .collect()
}

pub fn attrs_of(points: &[Point]) -> InstanceAttributes {
    compute_attributes(&SceneInstance {
        id: 1,
        points: points.to_vec(),
        class: 0,
    })
    .unwrap()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, random_vec(rng, r * c, lo, hi)).unwrap()
}

pub fn node_encoder(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let enc = NodeEncoder::new(&mut store, "n", 6, 4, &mut rng).unwrap();
    let pts = random_points(&mut rng, 6, [1.0, -2.0, 0.5]);
    let a = attrs_of(&pts);
    store_check(&store, seed, |t, s| {
        let out = enc.forward(t, s, &[(&pts, &a)]).unwrap();
        weighted_sum(t, out, seed + 1)
    })
}

pub fn visual_projection(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let vp = VisualProjection::new(&mut store, "v", 7, 4, &mut rng).unwrap();
    let row = random_vec(&mut rng, 7, -1.0, 1.0);
    store_check(&store, seed, |t, s| {
        let out = vp.forward(t, s, &[row.clone()]).unwrap();
        weighted_sum(t, out, seed + 1)
    })
}

pub fn fat_gnn(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let gnn = FatGnn::new(&mut store, "g", 4, &mut rng).unwrap();
    let nodes = random_matrix(&mut rng, 2, 4, -1.0, 1.0);
    let edges = random_matrix(&mut rng, 2, 4, -1.0, 1.0);
    store_check(&store, seed, |t, s| {
        let n = t.constant(nodes.clone()).unwrap();
        let e = t.constant(edges.clone()).unwrap();
        let (n2, e2) = gnn.forward(t, s, n, Some(e)).unwrap();
        let all = t.concat_rows(&[n2, e2.unwrap()]).unwrap();
        weighted_sum(t, all, seed + 1)
    })
}

pub fn masked_attention(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let att = Attention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
    let q = random_matrix(&mut rng, 3, 4, -1.0, 1.0);
    let c = random_matrix(&mut rng, 3, 4, -1.0, 1.0);
    let m = random_matrix(&mut rng, 3, 3, -2.0, 0.5);
    store_check(&store, seed, |t, s| {
        let qv = t.constant(q.clone()).unwrap();
        let cv = t.constant(c.clone()).unwrap();
        let mv = t.constant(m.clone()).unwrap();
        let out = att.forward(t, s, qv, cv, Some(mv)).unwrap();
        weighted_sum(t, out.out, seed + 1)
    })
}

pub fn distance_mask(seed: u64) -> FdReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mask = DistanceMask::new(&mut store, "m", 5, &mut rng).unwrap();
    let attrs: Vec<InstanceAttributes> = (0..3)
        .map(|i| attrs_of(&random_points(&mut rng, 8, [i as f64 * 1.5, 0.3, -0.2])))
        .collect();
    store_check(&store, seed, |t, s| {
        let out = mask.forward(t, s, &attrs).unwrap();
        weighted_sum(t, out, seed + 1)
    })
}

/// Encoders and reasoning layers, all parameters checked.
pub const LAYER_CASES: &[(&str, Case)] = &[
    ("node encoder", node_encoder),
    ("visual projection", visual_projection),
    ("fat gnn", fat_gnn),
    ("masked attention", masked_attention),
    ("distance mask", distance_mask),
];

// ---- whole model --------------------------------------------------------------

/// K = 3 scenes, D = 8, two reasoning layers, two heads.
pub fn joint_setup(seed: u64) -> (SceneGraphModel, GeneratedDataset) {
    let mut w = tiny_world(seed);
    w.k_min = 3;
    w.k_max = 3;
    let data = generate_dataset(&w).unwrap();
    let model = SceneGraphModel::new(
        ModelConfig {
            d: 8,
            hidden: 8,
            heads: 2,
            layers: 2,
            init_seed: seed,
        },
        ModelDims {
            n_obj: w.n_obj,
            n_rel: w.n_rel,
            d_vis: w.d_vis,
            d_emb: w.d_emb,
        },
    )
    .unwrap();
    (model, data)
}

/// Gradient of the weighted total loss of a joint forward: one random
/// coordinate from every parameter tensor plus 16 extra coordinates.
pub fn joint_model(seed: u64) -> FdReport {
    joint_model_covering(seed, &mut BTreeSet::new())
}

pub fn joint_model_covering(seed: u64, covered: &mut BTreeSet<ParamId>) -> FdReport {
    let weights = LossWeights::default();
    let (mut model, data) = joint_setup(seed);
    jitter(&mut model.params, 500 + seed);
    let scene = &data.train[seed as usize % data.train.len()];
    assert_eq!(scene.k(), 3);
    let prep = PreparedScene::new(scene, Some(&data.provider)).unwrap();
    let (grads, _) = scene_gradients(&model, &prep, &weights, true).unwrap();
    let store = &model.params;
    let analytic = grads.flatten(store);

    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut coords = Vec::new();
    let mut offset = 0;
    for (id, _, value) in store.iter() {
        coords.push(offset + rng.gen_range(0..value.numel()));
        covered.insert(id);
        offset += value.numel();
    }
    let mut extra: Vec<usize> = (0..store.total_len()).collect();
    extra.shuffle(&mut rng);
    coords.extend(extra.into_iter().take(16));

    let mut m2 = model.clone();
    let f = |flat: &[f64]| -> f64 {
        m2.params.set_flat(flat).unwrap();
        let mut t = Tape::new();
        let parts = scene_losses(&mut t, &m2, &prep, true).unwrap();
        let l = total_loss(&mut t, &parts, &weights).unwrap();
        t.value(l).item()
    };
    check_coords(f, &store.flatten(), &analytic, coords)
}
