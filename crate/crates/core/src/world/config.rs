use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{split_predicates, Vocabulary};

/// Parameters of the synthetic long-tailed scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_validation: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub n_obj: usize,
    pub n_rel: usize,
    /// Predicate `p` receives mass proportional to `(p + 1)^-zipf_exponent`.
    pub zipf_exponent: f64,
    /// The last `n_semantic` predicates depend on the hidden instance state.
    pub n_semantic: usize,
    pub n_states: usize,
    pub d_emb: usize,
    pub d_vis: usize,
    pub points_per_instance: usize,
    /// Per-view standard deviation of the visual feature noise.
    pub visual_noise: f64,
    pub n_views: usize,
    /// Depth of the corner cut that encodes a non-plain state, in half-extent units.
    pub chamfer: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_train: 200,
            n_validation: 100,
            k_min: 4,
            k_max: 9,
            n_obj: 16,
            n_rel: 13,
            zipf_exponent: 1.0,
            n_semantic: 4,
            n_states: 4,
            d_emb: 32,
            d_vis: 48,
            points_per_instance: 40,
            visual_noise: 0.15,
            n_views: 5,
            chamfer: 1.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.k_max < 2 {
            return fail(format!("k_max = {} leaves no room for a relation", self.k_max));
        }
        if self.k_min > self.k_max {
            return fail(format!("k_min {} exceeds k_max {}", self.k_min, self.k_max));
        }
        if self.n_obj < 3 {
            return fail("n_obj must be at least 3".into());
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return fail(format!("zipf exponent {} must be finite and >= 0", self.zipf_exponent));
        }
        if !(2..=5).contains(&self.n_states) {
            return fail("n_states must be between 2 and 5".into());
        }
        if self.d_vis <= self.d_emb {
            return fail(format!("d_vis {} must exceed d_emb {}", self.d_vis, self.d_emb));
        }
        if self.points_per_instance < 16 {
            return fail("points_per_instance must be at least 16".into());
        }
        if self.n_views == 0 {
            return fail("n_views must be at least 1".into());
        }
        if !(self.visual_noise >= 0.0) || !(self.chamfer > 0.0 && self.chamfer < 3.0) {
            return fail("visual_noise must be >= 0 and chamfer in (0, 3)".into());
        }
        if self.n_semantic >= self.n_rel {
            return fail("at least one geometric predicate is required".into());
        }
        let tail = tail_size(self.n_rel);
        if self.n_semantic > tail {
            return fail(format!(
                "{} semantic predicates do not fit in a tail of {tail}",
                self.n_semantic
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for b in self.semantic_bindings() {
            if !seen.insert((b.region_predicate, b.subject_state)) {
                return fail("semantic predicates collide on region and state; raise n_states".into());
            }
        }
        Ok(())
    }

    pub fn n_geometric(&self) -> usize {
        self.n_rel - self.n_semantic
    }

    pub fn d_state(&self) -> usize {
        self.d_vis - self.d_emb
    }

    pub fn semantic_set(&self) -> Vec<usize> {
        (self.n_geometric()..self.n_rel).collect()
    }

    pub fn is_semantic(&self, p: usize) -> bool {
        p >= self.n_geometric()
    }

    /// How each semantic predicate is decided: the region of a geometric
    /// predicate plus a required subject state.
    pub fn semantic_bindings(&self) -> Vec<SemanticBinding> {
        let n_geo = self.n_geometric();
        (0..self.n_semantic)
            .map(|i| SemanticBinding {
                predicate: n_geo + i,
                region_predicate: i % n_geo,
                subject_state: 1 + i % (self.n_states - 1),
            })
            .collect()
    }

    /// Normalized Zipf mass per predicate index.
    pub fn zipf_profile(&self) -> Vec<f64> {
        let raw: Vec<f64> = (0..self.n_rel)
            .map(|p| ((p + 1) as f64).powf(-self.zipf_exponent))
            .collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / z).collect()
    }
}

fn tail_size(n_rel: usize) -> usize {
    let mut v = Vocabulary::new(vec!["o".into()], (0..n_rel).map(|i| i.to_string()).collect())
        .expect("distinct names");
    v.predicate_train_frequency = (0..n_rel as u64).rev().collect();
    split_predicates(&v).tail.len()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticBinding {
    pub predicate: usize,
    pub region_predicate: usize,
    pub subject_state: usize,
}
