use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{SemanticBinding, WorldConfig};
use super::provider::{dot, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::scene::{Point, PredicateMatrix, SceneGraphSample, SceneInstance, Split, Vocabulary};

const CELL_SPACING: f64 = 9.0;
const CELL_JITTER: f64 = 1.0;
const GAP_STEP: f64 = 0.6;
const GAP_WIDTH: f64 = 0.15;
const FOOTPRINT: f64 = 0.8;
const SIZE_JITTER: f64 = 0.08;
const MIN_SIDE: f64 = 0.25;
const MAX_SIDE: f64 = 2.5;
/// Subject prototypes must be at most this fraction of the object's volume.
const SUBJECT_VOLUME_RATIO: f64 = 1.0 / 3.0;

/// Axis and sign of each relative-placement direction, indexed by `region % 6`.
const DIRECTIONS: [(usize, f64, &str); 6] = [
    (2, 1.0, "on_top_of"),
    (0, 1.0, "right_of"),
    (0, -1.0, "left_of"),
    (1, 1.0, "behind"),
    (1, -1.0, "in_front_of"),
    (2, -1.0, "below"),
];
const BANDS: [&str; 4] = ["touching", "near", "apart", "far"];
const SEMANTIC_NAMES: [&str; 6] = ["attached_to", "part_of", "belonging_to", "standing_in", "built_in", "leaning_against"];

/// Diagonals whose opposite corners are cut away for states `1..=4`.
const DIAGONALS: [[f64; 3]; 4] = [
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0],
    [1.0, -1.0, 1.0],
    [-1.0, 1.0, 1.0],
];

/// Rules and thresholds the generator used to place instances; echoed into
/// the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryThresholds {
    pub cell_spacing: f64,
    pub cell_jitter: f64,
    /// Gap of band `b` is drawn from `[b * gap_step, b * gap_step + gap_width]`.
    pub gap_step: f64,
    pub gap_width: f64,
    pub footprint_fraction: f64,
    pub size_jitter: f64,
    pub subject_volume_ratio: f64,
    pub chamfer: f64,
    /// Region of geometric predicate `g`: direction `g % 6`, band `g / 6`.
    pub directions: Vec<String>,
    pub bands: Vec<String>,
}

impl GeometryThresholds {
    fn new(cfg: &WorldConfig) -> Self {
        Self {
            cell_spacing: CELL_SPACING,
            cell_jitter: CELL_JITTER,
            gap_step: GAP_STEP,
            gap_width: GAP_WIDTH,
            footprint_fraction: FOOTPRINT,
            size_jitter: SIZE_JITTER,
            subject_volume_ratio: SUBJECT_VOLUME_RATIO,
            chamfer: cfg.chamfer,
            directions: DIRECTIONS.iter().map(|d| d.2.to_owned()).collect(),
            bands: BANDS.iter().map(|b| (*b).to_owned()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub config: WorldConfig,
    pub vocabulary: Vocabulary,
    pub provider: EmbeddingProvider,
    pub thresholds: GeometryThresholds,
    pub train: Vec<SceneGraphSample>,
    pub validation: Vec<SceneGraphSample>,
    /// Hidden per-instance state of every scene, keyed by scene id.
    pub states: BTreeMap<String, Vec<usize>>,
}

impl GeneratedDataset {
    pub fn all_samples(&self) -> impl Iterator<Item = &SceneGraphSample> {
        self.train.iter().chain(&self.validation)
    }
}

/// Stable 64-bit seed derived from a base seed and a path of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base;
    for &t in tags {
        x = splitmix(x ^ splitmix(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    x
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-predicate counts proportional to `profile` summing to `total`
/// (largest-remainder rounding, ties by index).
pub fn zipf_quota(profile: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = profile.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..profile.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &p in order.iter().take(total - assigned) {
        counts[p] += 1;
    }
    counts
}

struct ClassTable {
    half: Vec<[f64; 3]>,
    volume: Vec<f64>,
}

impl ClassTable {
    fn new(cfg: &WorldConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0xc1a55]));
        let n = cfg.n_obj;
        let mut half = Vec::with_capacity(n);
        let mut volume = Vec::with_capacity(n);
        for c in 0..n {
            let side = MIN_SIDE * (MAX_SIDE / MIN_SIDE).powf(c as f64 / (n - 1) as f64);
            let h = [0, 1, 2].map(|_| 0.5 * side * rng.gen_range(0.7..1.3));
            volume.push(8.0 * h[0] * h[1] * h[2]);
            half.push(h);
        }
        Self { half, volume }
    }

    fn subject_candidates(&self, object: usize) -> Vec<usize> {
        (0..self.volume.len())
            .filter(|&c| self.volume[c] <= SUBJECT_VOLUME_RATIO * self.volume[object])
            .collect()
    }
}

#[derive(Clone, Debug)]
struct PlacedInstance {
    class: usize,
    state: usize,
    center: [f64; 3],
    half: [f64; 3],
}

pub fn generate_dataset(cfg: &WorldConfig) -> Result<GeneratedDataset> {
    cfg.validate()?;
    let provider = EmbeddingProvider::new(cfg.seed, cfg.n_obj, cfg.n_rel, cfg.n_states, cfg.d_emb, cfg.d_state())?;
    let classes = ClassTable::new(cfg);
    if (0..cfg.n_obj).all(|c| classes.subject_candidates(c).is_empty()) {
        return Err(Error::Config("no object class is large enough to hold a subject".into()));
    }
    let mut vocabulary = Vocabulary::new(object_names(cfg.n_obj), predicate_names(cfg))?;

    let mut states = BTreeMap::new();
    let mut splits = Vec::new();
    for (tag, split, n) in [(1u64, Split::Train, cfg.n_train), (2, Split::Validation, cfg.n_validation)] {
        let scenes = generate_split(cfg, &provider, &classes, split, tag, n)?;
        let mut samples = Vec::with_capacity(scenes.len());
        for (sample, st) in scenes {
            states.insert(sample.scene_id.clone(), st);
            samples.push(sample);
        }
        splits.push(samples);
    }
    let validation = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    vocabulary.count_train_frequencies(&train);

    Ok(GeneratedDataset {
        config: cfg.clone(),
        vocabulary,
        provider,
        thresholds: GeometryThresholds::new(cfg),
        train,
        validation,
        states,
    })
}

fn object_names(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("object_{c:02}")).collect()
}

fn predicate_names(cfg: &WorldConfig) -> Vec<String> {
    let mut names: Vec<String> = (0..cfg.n_geometric())
        .map(|g| {
            let (dir, band) = (g % 6, g / 6);
            let band = BANDS.get(band).map_or_else(|| format!("band{band}"), |b| (*b).to_owned());
            format!("{}_{}", band, DIRECTIONS[dir].2)
        })
        .collect();
    for i in 0..cfg.n_semantic {
        names.push(
            SEMANTIC_NAMES
                .get(i)
                .map_or_else(|| format!("semantic_{i}"), |s| (*s).to_owned()),
        );
    }
    names
}

fn generate_split(
    cfg: &WorldConfig,
    provider: &EmbeddingProvider,
    classes: &ClassTable,
    split: Split,
    tag: u64,
    n: usize,
) -> Result<Vec<(SceneGraphSample, Vec<usize>)>> {
    let sizes: Vec<usize> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag, i as u64, 0]));
            rng.gen_range(cfg.k_min.max(2)..=cfg.k_max)
        })
        .collect();
    let total: usize = sizes.iter().map(|k| k / 2).sum();
    let quota = zipf_quota(&cfg.zipf_profile(), total);
    let mut slots: Vec<usize> = quota
        .iter()
        .enumerate()
        .flat_map(|(p, &c)| std::iter::repeat(p).take(c))
        .collect();
    slots.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag, u64::MAX])));

    let mut offsets = Vec::with_capacity(n);
    let mut off = 0;
    for k in &sizes {
        offsets.push(off);
        off += k / 2;
    }
    let bindings = cfg.semantic_bindings();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let preds = &slots[offsets[i]..offsets[i] + sizes[i] / 2];
            build_scene(cfg, provider, classes, &bindings, split, tag, i, sizes[i], preds)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn build_scene(
    cfg: &WorldConfig,
    provider: &EmbeddingProvider,
    classes: &ClassTable,
    bindings: &[SemanticBinding],
    split: Split,
    tag: u64,
    index: usize,
    k: usize,
    predicates: &[usize],
) -> Result<(SceneGraphSample, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag, index as u64, 1]));
    let n_cells = predicates.len() + k % 2;
    let side = (n_cells as f64).sqrt().ceil() as usize + 1;
    let mut cells: Vec<usize> = (0..side * side).collect();
    cells.shuffle(&mut rng);
    let cell_center = |cell: usize, rng: &mut ChaCha8Rng| {
        [
            (cell % side) as f64 * CELL_SPACING + rng.gen_range(-CELL_JITTER..CELL_JITTER),
            (cell / side) as f64 * CELL_SPACING + rng.gen_range(-CELL_JITTER..CELL_JITTER),
        ]
    };

    let mut placed: Vec<PlacedInstance> = Vec::with_capacity(k);
    let mut relations: Vec<(usize, usize, usize)> = Vec::new();
    for (slot, &p) in predicates.iter().enumerate() {
        let binding = bindings.iter().find(|b| b.predicate == p);
        let region = binding.map_or(p, |b| b.region_predicate);
        let subject_state = match binding {
            Some(b) => b.subject_state,
            None => {
                let taken: Vec<usize> = bindings
                    .iter()
                    .filter(|b| b.region_predicate == region)
                    .map(|b| b.subject_state)
                    .collect();
                let free: Vec<usize> = (0..cfg.n_states).filter(|s| !taken.contains(s)).collect();
                free[rng.gen_range(0..free.len())]
            }
        };
        let object_state = rng.gen_range(0..cfg.n_states);
        let holders: Vec<usize> = (0..cfg.n_obj)
            .filter(|&c| !classes.subject_candidates(c).is_empty())
            .collect();
        let object_class = holders[rng.gen_range(0..holders.len())];
        let candidates = classes.subject_candidates(object_class);
        let subject_class = candidates[rng.gen_range(0..candidates.len())];
        let ho = jittered(classes.half[object_class], &mut rng);
        let hs = jittered(classes.half[subject_class], &mut rng);
        let [cx, cy] = cell_center(cells[slot], &mut rng);
        let (axis, sign, _) = DIRECTIONS[region % 6];
        let band = (region / 6) as f64;
        let gap = rng.gen_range(band * GAP_STEP..=band * GAP_STEP + GAP_WIDTH);

        let mut co = [cx, cy, ho[2]];
        let mut cs = [cx, cy, hs[2]];
        if axis == 2 && sign < 0.0 {
            co[2] = 2.0 * hs[2] + gap + ho[2];
        }
        for a in 0..3 {
            if a == axis {
                cs[a] = co[a] + sign * (ho[a] + hs[a] + gap);
            } else if a != 2 {
                let room = FOOTPRINT * (ho[a] - hs[a]).max(0.0);
                cs[a] = co[a] + rng.gen_range(-1.0..=1.0) * room;
            }
        }
        let oi = placed.len();
        placed.push(PlacedInstance {
            class: object_class,
            state: object_state,
            center: co,
            half: ho,
        });
        placed.push(PlacedInstance {
            class: subject_class,
            state: subject_state,
            center: cs,
            half: hs,
        });
        relations.push((oi + 1, p, oi));
    }
    if k % 2 == 1 {
        let class = rng.gen_range(0..cfg.n_obj);
        let half = jittered(classes.half[class], &mut rng);
        let [cx, cy] = cell_center(cells[predicates.len()], &mut rng);
        placed.push(PlacedInstance {
            class,
            state: rng.gen_range(0..cfg.n_states),
            center: [cx, cy, half[2]],
            half,
        });
    }

    let mut order: Vec<usize> = (0..placed.len()).collect();
    order.shuffle(&mut rng);
    let mut position = vec![0; placed.len()];
    for (pos, &src) in order.iter().enumerate() {
        position[src] = pos;
    }
    let instances: Vec<SceneInstance> = order
        .iter()
        .enumerate()
        .map(|(pos, &src)| {
            let inst = &placed[src];
            SceneInstance {
                id: pos as u32 + 1,
                points: instance_points(inst, cfg, &mut rng),
                class: inst.class,
            }
        })
        .collect();
    let states: Vec<usize> = order.iter().map(|&src| placed[src].state).collect();
    let mut gt = PredicateMatrix::new(placed.len(), cfg.n_rel);
    for (s, p, o) in relations {
        gt.set(position[s], position[o], p)?;
    }

    let split_name = split.as_str();
    let mut sample = SceneGraphSample {
        scene_id: format!("{split_name}_{index:05}"),
        split,
        instances,
        predicates: gt,
        visual_features: None,
    };
    let vis_seed = derive_seed(cfg.seed, &[tag, index as u64, 2]);
    sample.visual_features = Some(visual_features(
        &sample,
        &states,
        provider,
        &VisualOptions {
            n_views: cfg.n_views,
            noise: cfg.visual_noise,
            seed: vis_seed,
        },
    )?);
    Ok((sample, states))
}

fn jittered(h: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    h.map(|v| v * rng.gen_range(1.0 - SIZE_JITTER..=1.0 + SIZE_JITTER))
}

/// Points of one box-shaped instance. Face centres pin the bounding box; the
/// state is carried by which pair of opposite corners is cut away.
fn instance_points(inst: &PlacedInstance, cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let diag = (inst.state > 0).then(|| DIAGONALS[(inst.state - 1) % DIAGONALS.len()]);
    let cut = 3.0 - cfg.chamfer;
    let inside = |u: [f64; 3]| match diag {
        Some(d) => (u[0] * d[0] + u[1] * d[1] + u[2] * d[2]).abs() <= cut,
        None => true,
    };
    let mut unit: Vec<[f64; 3]> = Vec::with_capacity(cfg.points_per_instance);
    for a in 0..3 {
        for s in [-1.0, 1.0] {
            let mut u = [0.0; 3];
            u[a] = s;
            unit.push(u);
        }
    }
    for x in [-1.0, 1.0] {
        for y in [-1.0, 1.0] {
            for z in [-1.0, 1.0] {
                if inside([x, y, z]) {
                    unit.push([x, y, z]);
                }
            }
        }
    }
    while unit.len() < cfg.points_per_instance {
        let u = [0, 1, 2].map(|_| rng.gen_range(-1.0..=1.0));
        if inside(u) {
            unit.push(u);
        }
    }
    unit.shuffle(rng);
    unit.into_iter()
        .map(|u| [0, 1, 2].map(|a| inst.center[a] + u[a] * inst.half[a]))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct VisualOptions {
    pub n_views: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Pooled visual features: per instance, the mean over `n_views` noisy draws
/// around its latent descriptor.
pub fn visual_features(
    scene: &SceneGraphSample,
    states: &[usize],
    provider: &EmbeddingProvider,
    opts: &VisualOptions,
) -> Result<Vec<Vec<f64>>> {
    if opts.n_views == 0 {
        return Err(Error::Config("n_views must be at least 1".into()));
    }
    if states.len() != scene.k() {
        return Err(Error::Contract("one state per instance required".into()));
    }
    let normal = Normal::new(0.0, opts.noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    Ok(scene
        .instances
        .iter()
        .zip(states)
        .map(|(inst, &state)| {
            let latent = provider.latent(inst.class, state);
            let mut noise = vec![0.0; latent.len()];
            for _ in 0..opts.n_views {
                for v in &mut noise {
                    *v += normal.sample(&mut rng);
                }
            }
            latent
                .iter()
                .zip(&noise)
                .map(|(l, e)| l + e / opts.n_views as f64)
                .collect()
        })
        .collect())
}

/// Balanced accuracy of two rule-based detectors of semantic predicates,
/// averaged over semantic predicates with validation support.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityReport {
    /// Detector fit on geometry and classes only (held-out evaluation).
    pub geometry_only: f64,
    /// Detector that also decodes the instance state from visual features.
    pub geometry_and_latent: f64,
    pub evaluated_predicates: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct GeoKey {
    region: usize,
    subject_class: usize,
    object_class: usize,
}

struct RelationView {
    key: GeoKey,
    predicate: usize,
    decoded_state: usize,
}

fn relation_views(samples: &[SceneGraphSample], provider: &EmbeddingProvider, d_emb: usize) -> Vec<RelationView> {
    let mut out = Vec::new();
    for s in samples {
        let boxes: Vec<([f64; 3], [f64; 3])> = s.instances.iter().map(|i| bbox(&i.points)).collect();
        for (i, p, j) in s.predicates.relations() {
            let region = decode_region(boxes[i], boxes[j]);
            let decoded_state = s
                .visual_features
                .as_ref()
                .map(|vis| {
                    let part = &vis[i][d_emb..];
                    (0..provider.n_states())
                        .max_by(|&a, &b| {
                            dot(part, provider.state_embedding(a)).total_cmp(&dot(part, provider.state_embedding(b)))
                        })
                        .unwrap_or(0)
                })
                .unwrap_or(0);
            out.push(RelationView {
                key: GeoKey {
                    region,
                    subject_class: s.instances[i].class,
                    object_class: s.instances[j].class,
                },
                predicate: p,
                decoded_state,
            });
        }
    }
    out
}

fn bbox(points: &[Point]) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    ([0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a])), [0, 1, 2].map(|a| 0.5 * (hi[a] - lo[a])))
}

/// Region index (`direction + 6 * band`) of subject box `s` relative to object box `o`.
fn decode_region(s: ([f64; 3], [f64; 3]), o: ([f64; 3], [f64; 3])) -> usize {
    let (cs, hs) = s;
    let (co, ho) = o;
    let ratio = |a: usize| (cs[a] - co[a]).abs() / (hs[a] + ho[a]);
    let axis = (0..3).max_by(|&a, &b| ratio(a).total_cmp(&ratio(b))).unwrap_or(0);
    let sign = if cs[axis] >= co[axis] { 1.0 } else { -1.0 };
    let dir = DIRECTIONS
        .iter()
        .position(|&(a, s, _)| a == axis && s == sign)
        .unwrap_or(0);
    let gap = (cs[axis] - co[axis]).abs() - (hs[axis] + ho[axis]);
    let band = ((gap - 0.5 * GAP_WIDTH) / GAP_STEP).round().max(0.0) as usize;
    dir + 6 * band
}

pub fn separability_report(data: &GeneratedDataset) -> SeparabilityReport {
    let d_emb = data.config.d_emb;
    let fit = relation_views(&data.train, &data.provider, d_emb);
    let eval = relation_views(&data.validation, &data.provider, d_emb);
    let mut geo_scores = Vec::new();
    let mut latent_scores = Vec::new();
    for b in data.config.semantic_bindings() {
        let mut table: HashMap<GeoKey, (usize, usize)> = HashMap::new();
        let mut region_rate = (0usize, 0usize);
        for r in fit.iter().filter(|r| r.key.region == b.region_predicate) {
            let e = table.entry(r.key).or_default();
            let pos = usize::from(r.predicate == b.predicate);
            e.0 += pos;
            e.1 += 1;
            region_rate.0 += pos;
            region_rate.1 += 1;
        }
        let majority = |(pos, n): (usize, usize)| 2 * pos > n;
        let mut geo = Confusion::default();
        let mut lat = Confusion::default();
        for r in &eval {
            let truth = r.predicate == b.predicate;
            let in_region = r.key.region == b.region_predicate;
            let geo_pred = in_region && majority(table.get(&r.key).copied().unwrap_or(region_rate));
            let lat_pred = in_region && r.decoded_state == b.subject_state;
            geo.add(truth, geo_pred);
            lat.add(truth, lat_pred);
        }
        if let (Some(g), Some(l)) = (geo.balanced(), lat.balanced()) {
            geo_scores.push(g);
            latent_scores.push(l);
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    SeparabilityReport {
        geometry_only: mean(&geo_scores),
        geometry_and_latent: mean(&latent_scores),
        evaluated_predicates: geo_scores.len(),
    }
}

#[derive(Default)]
struct Confusion {
    tp: usize,
    fneg: usize,
    tn: usize,
    fp: usize,
}

impl Confusion {
    fn add(&mut self, truth: bool, pred: bool) {
        match (truth, pred) {
            (true, true) => self.tp += 1,
            (true, false) => self.fneg += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fp += 1,
        }
    }

    fn balanced(&self) -> Option<f64> {
        let pos = self.tp + self.fneg;
        let neg = self.tn + self.fp;
        (pos > 0 && neg > 0).then(|| 0.5 * (self.tp as f64 / pos as f64 + self.tn as f64 / neg as f64))
    }
}
