use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SceneGraphSample, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub object_names: Vec<String>,
    pub predicate_names: Vec<String>,
    /// Relation counts per predicate over the training split only.
    pub predicate_train_frequency: Vec<u64>,
}

impl Vocabulary {
    pub fn new(object_names: Vec<String>, predicate_names: Vec<String>) -> Result<Self> {
        for (kind, names) in [("object", &object_names), ("predicate", &predicate_names)] {
            let unique: BTreeSet<&String> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::Config(format!("duplicate {kind} names in vocabulary")));
            }
            if names.is_empty() {
                return Err(Error::Config(format!("empty {kind} vocabulary")));
            }
        }
        let n_rel = predicate_names.len();
        Ok(Self {
            object_names,
            predicate_names,
            predicate_train_frequency: vec![0; n_rel],
        })
    }

    pub fn n_obj(&self) -> usize {
        self.object_names.len()
    }

    pub fn n_rel(&self) -> usize {
        self.predicate_names.len()
    }

    /// Recounts predicate frequencies from the training scenes in `samples`.
    pub fn count_train_frequencies(&mut self, samples: &[SceneGraphSample]) {
        let mut freq = vec![0u64; self.n_rel()];
        for s in samples.iter().filter(|s| s.split == Split::Train) {
            for (_, p, _) in s.predicates.relations() {
                freq[p] += 1;
            }
        }
        self.predicate_train_frequency = freq;
    }

    /// Hash over the ordered object and predicate names.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.object_names {
            h.update(n.as_bytes());
            h.update([0]);
        }
        h.update([1]);
        for n in &self.predicate_names {
            h.update(n.as_bytes());
            h.update([0]);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Frequency-ordered partition of predicate classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateSplits {
    pub head: BTreeSet<usize>,
    pub body: BTreeSet<usize>,
    pub tail: BTreeSet<usize>,
}

impl PredicateSplits {
    pub fn named(&self) -> [(&'static str, &BTreeSet<usize>); 3] {
        [("head", &self.head), ("body", &self.body), ("tail", &self.tail)]
    }
}

/// Sorts predicates by training frequency (descending, ties by index) and
/// takes the top 8/26 of them as head and the bottom 12/26 as tail.
pub fn split_predicates(vocab: &Vocabulary) -> PredicateSplits {
    let n = vocab.n_rel();
    let (h, t) = split_sizes(n);
    let mut order: Vec<usize> = (0..n).collect();
    let freq = &vocab.predicate_train_frequency;
    order.sort_by(|&a, &b| freq[b].cmp(&freq[a]).then(a.cmp(&b)));
    PredicateSplits {
        head: order[..h].iter().copied().collect(),
        body: order[h..n - t].iter().copied().collect(),
        tail: order[n - t..].iter().copied().collect(),
    }
}

fn split_sizes(n: usize) -> (usize, usize) {
    if n == 26 {
        return (8, 12);
    }
    let h = ((8.0 / 26.0) * n as f64).round() as usize;
    let t = ((12.0 / 26.0) * n as f64).round() as usize;
    let h = h.min(n);
    (h, t.min(n - h))
}
