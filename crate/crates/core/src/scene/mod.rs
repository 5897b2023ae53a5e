//! Scenes, instances and ground-truth scene graphs.

mod attributes;
mod io;
mod vocab;

pub use attributes::{compute_attributes, InstanceAttributes, BOX_EPS};
pub use io::{load_scene_file, parse_scene_lines, scene_to_line, write_scene_file, LoadOptions};
pub use vocab::{split_predicates, PredicateSplits, Vocabulary};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    /// Identity of the instance mask within its scene.
    pub id: u32,
    pub points: Vec<Point>,
    pub class: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

/// Multi-label predicate ground truth over ordered instance pairs (`K × K × N_rel`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PredicateMatrix {
    k: usize,
    n_rel: usize,
    bits: Vec<bool>,
}

impl PredicateMatrix {
    pub fn new(k: usize, n_rel: usize) -> Self {
        Self {
            k,
            n_rel,
            bits: vec![false; k * k * n_rel],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_rel(&self) -> usize {
        self.n_rel
    }

    pub fn get(&self, i: usize, j: usize, p: usize) -> bool {
        self.bits[(i * self.k + j) * self.n_rel + p]
    }

    pub fn set(&mut self, i: usize, j: usize, p: usize) -> Result<()> {
        if i == j {
            return Err(Error::Contract(format!("self-relation on instance {i}")));
        }
        if i >= self.k || j >= self.k || p >= self.n_rel {
            return Err(Error::Contract(format!("relation ({i}, {p}, {j}) out of range")));
        }
        self.bits[(i * self.k + j) * self.n_rel + p] = true;
        Ok(())
    }

    /// Ground-truth predicates of the ordered pair `(i, j)`.
    pub fn labels(&self, i: usize, j: usize) -> Vec<usize> {
        (0..self.n_rel).filter(|&p| self.get(i, j, p)).collect()
    }

    /// All `(subject, predicate, object)` relations in pair-major order.
    pub fn relations(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (i, j) in edge_pairs(self.k) {
            for p in 0..self.n_rel {
                if self.get(i, j, p) {
                    out.push((i, p, j));
                }
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Binary `E × N_rel` rows aligned with [`edge_pairs`].
    pub fn edge_rows(&self) -> Vec<Vec<f64>> {
        edge_pairs(self.k)
            .into_iter()
            .map(|(i, j)| {
                (0..self.n_rel)
                    .map(|p| if self.get(i, j, p) { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect()
    }
}

/// Ordered pairs `(i, j)` with `i != j`, subject-major. This is the edge order
/// used everywhere edges are stored as rows.
pub fn edge_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(k * k.saturating_sub(1));
    for i in 0..k {
        for j in 0..k {
            if i != j {
                out.push((i, j));
            }
        }
    }
    out
}

/// Row index of the ordered pair `(i, j)` in [`edge_pairs`] order.
pub fn edge_index(k: usize, i: usize, j: usize) -> usize {
    debug_assert!(i != j && i < k && j < k);
    i * (k - 1) + if j < i { j } else { j - 1 }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGraphSample {
    pub scene_id: String,
    pub split: Split,
    pub instances: Vec<SceneInstance>,
    pub predicates: PredicateMatrix,
    /// `K × D_vis` pooled visual features, one row per instance.
    pub visual_features: Option<Vec<Vec<f64>>>,
}

impl SceneGraphSample {
    pub fn k(&self) -> usize {
        self.instances.len()
    }

    pub fn object_labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.class).collect()
    }

    pub fn attributes(&self) -> Result<Vec<InstanceAttributes>> {
        self.instances.iter().map(compute_attributes).collect()
    }

    /// `(subject class, predicate, object class)` for every relation.
    pub fn class_triplets(&self) -> Vec<(usize, usize, usize)> {
        self.predicates
            .relations()
            .into_iter()
            .map(|(i, p, j)| (self.instances[i].class, p, self.instances[j].class))
            .collect()
    }
}
