use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Blend weights of subject, predicate and object embeddings in a triplet embedding.
pub const TRIPLET_BLEND: [f64; 3] = [0.35, 0.30, 0.35];

/// Upper bound on pairwise cosine between distinct object or predicate embeddings.
pub const MAX_PAIR_COSINE: f64 = 0.9;

/// Fixed surrogate for pretrained vision and text encoders.
///
/// Object, predicate and instance-state embeddings are seeded unit vectors.
/// Triplet text embeddings blend the three component vectors and renormalize.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingProvider {
    d_emb: usize,
    object: Vec<Vec<f64>>,
    predicate: Vec<Vec<f64>>,
    state: Vec<Vec<f64>>,
}

impl EmbeddingProvider {
    pub fn new(
        seed: u64,
        n_obj: usize,
        n_rel: usize,
        n_states: usize,
        d_emb: usize,
        d_state: usize,
    ) -> Result<Self> {
        if d_emb < 2 || d_state == 0 {
            return Err(Error::Config("embedding widths too small".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e3b0_c442_98fc);
        let object = distinct_unit_rows(&mut rng, n_obj, d_emb, "object")?;
        let predicate = distinct_unit_rows(&mut rng, n_rel, d_emb, "predicate")?;
        let state = distinct_unit_rows(&mut rng, n_states, d_state, "state")?;
        Ok(Self {
            d_emb,
            object,
            predicate,
            state,
        })
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn n_obj(&self) -> usize {
        self.object.len()
    }

    pub fn n_rel(&self) -> usize {
        self.predicate.len()
    }

    pub fn object_embedding(&self, class: usize) -> &[f64] {
        &self.object[class]
    }

    pub fn predicate_embedding(&self, predicate: usize) -> &[f64] {
        &self.predicate[predicate]
    }

    pub fn state_embedding(&self, state: usize) -> &[f64] {
        &self.state[state]
    }

    pub fn n_states(&self) -> usize {
        self.state.len()
    }

    /// `N_obj × D_emb` matrix of object embeddings.
    pub fn object_matrix(&self) -> Tensor {
        Tensor::matrix(self.object.len(), self.d_emb, self.object.concat())
            .expect("rows share the embedding width")
    }

    /// Embedding of "a scene of a/an [subject] [predicate] a/an [object]".
    pub fn text_embedding(&self, subject: usize, predicate: usize, object: usize) -> Result<Vec<f64>> {
        if subject >= self.n_obj() || object >= self.n_obj() || predicate >= self.n_rel() {
            return Err(Error::Contract(format!(
                "triplet ({subject}, {predicate}, {object}) out of vocabulary range"
            )));
        }
        let [ws, wp, wo] = TRIPLET_BLEND;
        let v: Vec<f64> = (0..self.d_emb)
            .map(|d| ws * self.object[subject][d] + wp * self.predicate[predicate][d] + wo * self.object[object][d])
            .collect();
        Ok(normalized(v))
    }

    /// Noise-free visual descriptor of an instance: object part then state part.
    pub fn latent(&self, class: usize, state: usize) -> Vec<f64> {
        let mut v = self.object[class].clone();
        v.extend_from_slice(&self.state[state]);
        v
    }
}

fn distinct_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, kind: &str) -> Result<Vec<Vec<f64>>> {
    for _ in 0..64 {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| normalized((0..d).map(|_| StandardNormal.sample(rng)).collect()))
            .collect();
        if max_pair_cosine(&rows) <= MAX_PAIR_COSINE {
            return Ok(rows);
        }
    }
    Err(Error::Config(format!(
        "could not draw {n} {kind} embeddings of width {d} with pairwise cosine <= {MAX_PAIR_COSINE}"
    )))
}

pub(crate) fn max_pair_cosine(rows: &[Vec<f64>]) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            worst = worst.max(dot(&rows[i], &rows[j]));
        }
    }
    worst
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    for x in &mut v {
        *x /= n;
    }
    v
}
