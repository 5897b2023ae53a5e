//! Training: loss terms, objective, optimizer, the epoch loop and checkpoints.
//!
//! Each scene of a batch runs forward/backward on its own tape (in parallel);
//! gradients are then summed in batch order, which equals the gradient of the
//! summed batch loss.

mod checkpoint;
mod losses;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_f64s, encode_f64s, ArrayRecord, Checkpoint, OptimizerRecord, CHECKPOINT_FORMAT};
pub use losses::{
    loss_node_init, loss_obj, loss_pred, loss_tri_emb, text_terms, total_loss, LossParts, LossWeights, TextTerm,
    COSINE_EPS,
};
pub use optim::{cosine_lr, AdamW, AdamWConfig};

use crate::error::{Error, Result};
use crate::reasoning::{Mode, SceneGraphModel};
use crate::scene::{InstanceAttributes, SceneGraphSample};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use crate::world::{derive_seed, EmbeddingProvider};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub optimizer: AdamWConfig,
    /// Joint training with the oracle branch; `false` trains the 3D-only baseline.
    pub vlsat: bool,
    /// Seed for per-epoch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 8,
            lr: 1e-3,
            weights: LossWeights::default(),
            optimizer: AdamWConfig::default(),
            vlsat: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps <= 0.0 || o.weight_decay < 0.0 {
            return Err(Error::Config("invalid AdamW hyperparameters".into()));
        }
        self.weights.validate()
    }
}

/// Sets both object classifiers to the provider's object embeddings
/// (one unit row per class) with zero bias.
pub fn init_classifier_from_embeddings(model: &mut SceneGraphModel, provider: &EmbeddingProvider) -> Result<()> {
    let e = provider.object_matrix();
    if e.cols() != model.config.d {
        return Err(Error::Config(format!(
            "embedding width {} differs from node width {} and no projection is configured",
            e.cols(),
            model.config.d
        )));
    }
    if e.rows() != model.dims.n_obj {
        return Err(Error::Config(format!(
            "provider has {} object classes, model has {}",
            e.rows(),
            model.dims.n_obj
        )));
    }
    for c in [&model.threed.object_classifier, &model.oracle.stream.object_classifier] {
        *model.params.get_mut(c.weight) = e.clone();
        *model.params.get_mut(c.bias) = Tensor::zeros(&[1, e.rows()]);
    }
    Ok(())
}

/// Per-scene data that does not change during training.
pub struct PreparedScene<'a> {
    pub scene: &'a SceneGraphSample,
    pub attrs: Vec<InstanceAttributes>,
    pub labels: Vec<usize>,
    pub targets: Option<Tensor>,
    pub terms: Vec<TextTerm>,
}

impl<'a> PreparedScene<'a> {
    pub fn new(scene: &'a SceneGraphSample, provider: Option<&EmbeddingProvider>) -> Result<Self> {
        let rows = scene.predicates.edge_rows();
        let targets = if rows.is_empty() {
            None
        } else {
            Some(Tensor::from_rows(&rows)?)
        };
        Ok(Self {
            attrs: scene.attributes()?,
            labels: scene.object_labels(),
            targets,
            terms: match provider {
                Some(p) => text_terms(scene, p)?,
                None => Vec::new(),
            },
            scene,
        })
    }
}

/// Records the loss terms of one scene on `tape`.
pub fn scene_losses(
    tape: &mut Tape,
    model: &SceneGraphModel,
    prep: &PreparedScene<'_>,
    vlsat: bool,
) -> Result<LossParts<Var>> {
    let mode = if vlsat { Mode::Joint } else { Mode::ThreeDOnly };
    let out = model.forward_with(tape, prep.scene, &prep.attrs, mode)?;
    let mut parts = LossParts {
        obj_3d: Some(loss_obj(tape, out.threed.object_logits, &prep.labels)?),
        ..LossParts::default()
    };
    if let (Some(l), Some(y)) = (out.threed.predicate_logits, &prep.targets) {
        parts.pred_3d = Some(loss_pred(tape, l, y)?);
    }
    if let Some(or) = out.oracle {
        parts.obj_or = Some(loss_obj(tape, or.stream.object_logits, &prep.labels)?);
        if let (Some(l), Some(y)) = (or.stream.predicate_logits, &prep.targets) {
            parts.pred_or = Some(loss_pred(tape, l, y)?);
        }
        parts.tri = Some(match or.fused {
            Some(f) => loss_tri_emb(tape, f, &prep.terms)?,
            None => tape.constant(Tensor::scalar(0.0))?,
        });
        parts.node = Some(loss_node_init(tape, out.threed.node_init, or.stream.node_init)?);
    }
    Ok(parts)
}

/// Loss values of one scene.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneLoss {
    pub total: f64,
    pub parts: LossParts<f64>,
}

/// Forward + backward for one scene on a fresh tape.
pub fn scene_gradients(
    model: &SceneGraphModel,
    prep: &PreparedScene<'_>,
    weights: &LossWeights,
    vlsat: bool,
) -> Result<(Gradients, SceneLoss)> {
    let mut tape = Tape::new();
    let parts = scene_losses(&mut tape, model, prep, vlsat)?;
    let total = total_loss(&mut tape, &parts, weights)?;
    tape.backward(total)?;
    let loss = SceneLoss {
        total: tape.value(total).item(),
        parts: parts.map(|v| tape.value(v).item()),
    };
    Ok((tape.param_gradients(&model.params), loss))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_obj_3d: Option<f64>,
    pub loss_obj_or: Option<f64>,
    pub loss_pred_3d: Option<f64>,
    pub loss_pred_or: Option<f64>,
    pub loss_tri: Option<f64>,
    pub loss_node: Option<f64>,
}

#[derive(Default)]
struct Accum {
    total: f64,
    scenes: usize,
    sums: [f64; 6],
    counts: [usize; 6],
}

impl Accum {
    fn add(&mut self, l: &SceneLoss) {
        self.total += l.total;
        self.scenes += 1;
        for (idx, (_, v)) in l.parts.named().into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[idx] += v;
                self.counts[idx] += 1;
            }
        }
    }

    fn finish(&self, epoch: usize, lr: f64) -> EpochLog {
        let m = |i: usize| (self.counts[i] > 0).then(|| self.sums[i] / self.counts[i] as f64);
        EpochLog {
            epoch,
            lr,
            loss_total: self.total / self.scenes.max(1) as f64,
            loss_obj_3d: m(0),
            loss_obj_or: m(1),
            loss_pred_3d: m(2),
            loss_pred_or: m(3),
            loss_tri: m(4),
            loss_node: m(5),
        }
    }
}

fn numeric_abort(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::NumericAbort {
            epoch,
            batch,
            term: op.to_owned(),
        },
        other => other,
    }
}

/// Scene order used for epoch `epoch` (0-based).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64]));
    order.shuffle(&mut rng);
    order
}

/// Mutable training state: model parameters plus optimizer moments.
pub struct Trainer<'a> {
    pub model: SceneGraphModel,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    scenes: Vec<PreparedScene<'a>>,
}

impl<'a> Trainer<'a> {
    /// Fresh run. In joint mode the object classifiers start from the
    /// provider's object embeddings.
    pub fn new(
        mut model: SceneGraphModel,
        scenes: &'a [SceneGraphSample],
        provider: &EmbeddingProvider,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if config.vlsat {
            init_classifier_from_embeddings(&mut model, provider)?;
        }
        let optimizer = AdamW::new(config.optimizer, &model.params);
        Self::resume(model, optimizer, 0, scenes, provider, config)
    }

    pub fn resume(
        model: SceneGraphModel,
        optimizer: AdamW,
        epoch: usize,
        scenes: &'a [SceneGraphSample],
        provider: &EmbeddingProvider,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if scenes.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        if config.vlsat {
            if let Some(s) = scenes.iter().find(|s| s.visual_features.is_none()) {
                return Err(Error::Data(format!("scene '{}' has no visual features", s.scene_id)));
            }
        }
        let p = config.vlsat.then_some(provider);
        let scenes = scenes.iter().map(|s| PreparedScene::new(s, p)).collect::<Result<_>>()?;
        Ok(Self {
            model,
            optimizer,
            epoch,
            config,
            scenes,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Runs one epoch and returns its log record.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let cfg = &self.config;
        let t = self.epoch;
        let lr = cosine_lr(cfg.lr, t, cfg.epochs);
        let order = epoch_order(self.scenes.len(), cfg.seed, t);
        let mut acc = Accum::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let model = &self.model;
            let scenes = &self.scenes;
            let results: Vec<Result<(Gradients, SceneLoss)>> = batch
                .par_iter()
                .map(|&i| scene_gradients(model, &scenes[i], &cfg.weights, cfg.vlsat))
                .collect();
            let mut grads = Gradients::empty(model.params.len());
            for r in results {
                let (g, l) = r.map_err(|e| numeric_abort(e, t + 1, b))?;
                if let Some((name, _)) = l.parts.named().into_iter().find(|(_, v)| v.is_some_and(|v| !v.is_finite())) {
                    return Err(Error::NumericAbort {
                        epoch: t + 1,
                        batch: b,
                        term: name.to_owned(),
                    });
                }
                grads.accumulate(&g);
                acc.add(&l);
            }
            self.optimizer
                .step(&mut self.model.params, &grads, lr)
                .map_err(|e| numeric_abort(e, t + 1, b))?;
        }
        self.epoch += 1;
        let log = acc.finish(self.epoch, lr);
        log::info!("epoch {} lr {:.3e} loss {:.5}", log.epoch, lr, log.loss_total);
        Ok(log)
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Self, &EpochLog) -> Result<()>) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while !self.is_done() {
            let log = self.run_epoch()?;
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

#[cfg(test)]
mod tests;
