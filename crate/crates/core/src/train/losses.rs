//! Loss terms and the weighted objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{edge_index, SceneGraphSample};
use crate::tensor::{Tape, Tensor, Var};
use crate::world::EmbeddingProvider;

/// Guard added to the cosine denominator.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub obj: f64,
    pub pred: f64,
    pub aux: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            obj: 0.1,
            pred: 1.0,
            aux: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("obj", self.obj), ("pred", self.pred), ("aux", self.aux)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy over rows.
pub fn loss_obj(tape: &mut Tape, logits: Var, gt: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (k, n) = (shape[0], shape[1]);
    if gt.len() != k {
        return Err(Error::dim("loss_obj", format!("{} labels for {k} rows", gt.len())));
    }
    let mut onehot = Tensor::zeros(&[k, n]);
    for (r, &c) in gt.iter().enumerate() {
        if c >= n {
            return Err(Error::Contract(format!("object label {c} out of range for {n} classes")));
        }
        onehot.data_mut()[r * n + c] = 1.0;
    }
    let ls = tape.log_softmax(logits)?;
    let oh = tape.constant(onehot)?;
    let picked = tape.mul(ls, oh)?;
    let s = tape.sum(picked)?;
    tape.scale(s, -1.0 / k as f64)
}

/// Mean binary cross-entropy with logits over every pair and class:
/// `softplus(x) − y·x`.
pub fn loss_pred(tape: &mut Tape, logits: Var, gt: &Tensor) -> Result<Var> {
    if tape.shape(logits) != gt.shape() {
        return Err(Error::dim(
            "loss_pred",
            format!("logits {:?} vs targets {:?}", tape.shape(logits), gt.shape()),
        ));
    }
    let sp = tape.softplus(logits)?;
    let y = tape.constant(gt.clone())?;
    let yx = tape.mul(y, logits)?;
    let l = tape.sub(sp, yx)?;
    tape.mean(l)
}

/// One ground-truth predicate on one edge, with its text embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTerm {
    pub edge: usize,
    pub text: Vec<f64>,
}

/// One term per ground-truth `(i, p, j)`, in relation order.
pub fn text_terms(scene: &SceneGraphSample, provider: &EmbeddingProvider) -> Result<Vec<TextTerm>> {
    let k = scene.k();
    let labels = scene.object_labels();
    scene
        .predicates
        .relations()
        .into_iter()
        .map(|(i, p, j)| {
            Ok(TextTerm {
                edge: edge_index(k, i, j),
                text: provider.text_embedding(labels[i], p, labels[j])?,
            })
        })
        .collect()
}

/// Mean-per-dimension ℓ1 between fused triplets and their text embeddings,
/// summed over terms and divided by the number of distinct gt pairs.
/// With no terms the result is a constant zero.
pub fn loss_tri_emb(tape: &mut Tape, fused: Var, terms: &[TextTerm]) -> Result<Var> {
    if terms.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let shape = tape.shape(fused).to_vec();
    let (e, d) = (shape[0], shape[1]);
    let mut rows = Vec::with_capacity(terms.len());
    let mut text = Vec::with_capacity(terms.len() * d);
    for t in terms {
        if t.edge >= e || t.text.len() != d {
            return Err(Error::dim("loss_tri_emb", format!("term on edge {} width {}", t.edge, t.text.len())));
        }
        rows.push(t.edge);
        text.extend_from_slice(&t.text);
    }
    let mut pairs = rows.clone();
    pairs.sort_unstable();
    pairs.dedup();
    let picked = tape.gather_rows(fused, &rows)?;
    let target = tape.constant(Tensor::matrix(rows.len(), d, text)?)?;
    let diff = tape.sub(picked, target)?;
    let diff = tape.abs(diff)?;
    let s = tape.sum(diff)?;
    tape.scale(s, 1.0 / (d * pairs.len()) as f64)
}

/// Mean negative cosine between matching rows.
pub fn loss_node_init(tape: &mut Tape, threed: Var, oracle: Var) -> Result<Var> {
    let c = tape.row_cosine(threed, oracle, COSINE_EPS)?;
    let m = tape.mean(c)?;
    tape.scale(m, -1.0)
}

/// Individual loss terms of one scene. Absent terms do not contribute.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub obj_3d: Option<T>,
    pub obj_or: Option<T>,
    pub pred_3d: Option<T>,
    pub pred_or: Option<T>,
    pub tri: Option<T>,
    pub node: Option<T>,
}

impl<T> Default for LossParts<T> {
    fn default() -> Self {
        Self {
            obj_3d: None,
            obj_or: None,
            pred_3d: None,
            pred_or: None,
            tri: None,
            node: None,
        }
    }
}

impl<T: Copy> LossParts<T> {
    pub fn named(&self) -> [(&'static str, Option<T>); 6] {
        [
            ("loss_obj_3d", self.obj_3d),
            ("loss_obj_or", self.obj_or),
            ("loss_pred_3d", self.pred_3d),
            ("loss_pred_or", self.pred_or),
            ("loss_tri", self.tri),
            ("loss_node", self.node),
        ]
    }

    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> LossParts<U> {
        LossParts {
            obj_3d: self.obj_3d.map(&mut f),
            obj_or: self.obj_or.map(&mut f),
            pred_3d: self.pred_3d.map(&mut f),
            pred_or: self.pred_or.map(&mut f),
            tri: self.tri.map(&mut f),
            node: self.node.map(&mut f),
        }
    }
}

/// `λ_obj(obj_3d + obj_or) + λ_pred(pred_3d + pred_or) + λ_aux(tri + node)`.
pub fn total_loss(tape: &mut Tape, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    let groups = [
        (w.obj, [parts.obj_3d, parts.obj_or]),
        (w.pred, [parts.pred_3d, parts.pred_or]),
        (w.aux, [parts.tri, parts.node]),
    ];
    let mut total: Option<Var> = None;
    for (lambda, terms) in groups {
        let mut group: Option<Var> = None;
        for t in terms.into_iter().flatten() {
            group = Some(match group {
                Some(g) => tape.add(g, t)?,
                None => t,
            });
        }
        if let Some(g) = group {
            let g = tape.scale(g, lambda)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, g)?,
                None => g,
            });
        }
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(Tensor::scalar(0.0)),
    }
}
