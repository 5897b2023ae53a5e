//! The two-stream reasoning stack and its classifier heads.
//!
//! Both streams run `T` layers of self-attention followed by gated message
//! passing. In joint mode the oracle stream additionally queries the 3D
//! stream before (nodes, distance-masked) and after (edges, unmasked) every
//! message-passing step. Nothing flows from the oracle into the 3D forward
//! values, so 3D outputs are identical in both modes.

mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use layers::{Attention, AttentionOutput, Classifier, DistanceMask, FatGnn};

use crate::encoders::{EdgeEncoder, NodeEncoder, VisualProjection};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::scene::{edge_pairs, InstanceAttributes, SceneGraphSample};
use crate::tensor::{ParamId, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Node and edge feature width `D`.
    pub d: usize,
    /// Hidden width of the point, edge and mask MLPs.
    pub hidden: usize,
    pub heads: usize,
    /// Number of reasoning layers `T`.
    pub layers: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            hidden: 64,
            heads: 8,
            layers: 2,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide D={}", self.heads, self.d)));
        }
        Ok(())
    }
}

/// Sizes fixed by the dataset rather than the model config.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_obj: usize,
    pub n_rel: usize,
    pub d_vis: usize,
    pub d_emb: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    ThreeDOnly,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamLayer {
    pub mhsa: Attention,
    pub gnn: FatGnn,
}

/// Reasoning layers plus classifier heads of one stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stream {
    pub layers: Vec<StreamLayer>,
    pub object_classifier: Classifier,
    pub predicate_classifier: Classifier,
}

impl Stream {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, dims: &ModelDims, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            layers.push(StreamLayer {
                mhsa: Attention::new(store, &format!("{name}.layer{l}.mhsa"), cfg.d, cfg.heads, rng)?,
                gnn: FatGnn::new(store, &format!("{name}.layer{l}.gnn"), cfg.d, rng)?,
            });
        }
        Ok(Self {
            layers,
            object_classifier: Classifier::new(store, &format!("{name}.object_classifier"), cfg.d, dims.n_obj, rng)?,
            predicate_classifier: Classifier::new(
                store,
                &format!("{name}.predicate_classifier"),
                3 * cfg.d,
                dims.n_rel,
                rng,
            )?,
        })
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self
            .layers
            .iter()
            .flat_map(|l| l.mhsa.params().into_iter().chain(l.gnn.params()))
            .collect();
        v.extend(self.object_classifier.params());
        v.extend(self.predicate_classifier.params());
        v
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleBranch {
    pub visual: VisualProjection,
    pub edge_encoder: EdgeEncoder,
    pub stream: Stream,
    pub node_collab: Vec<Attention>,
    pub edge_collab: Vec<Attention>,
    pub mask: DistanceMask,
    pub fuse: Linear,
}

/// Epsilon of the row normalization applied to 3D encoder outputs.
pub const INPUT_NORM_EPS: f64 = 1e-5;

/// Layer-normalizes encoder rows before reasoning. Raw pair descriptors span
/// scene-scale offsets, so without this far-apart pairs swamp the mean
/// aggregation in the GNN.
fn normalize_rows(tape: &mut Tape, x: Option<Var>) -> Result<Option<Var>> {
    x.map(|v| tape.layer_norm(v, INPUT_NORM_EPS)).transpose()
}

/// Triplet-feature matrix `cat(n_i, e_ij, n_j)` over [`edge_pairs`] order.
fn triplet_features(tape: &mut Tape, nodes: Var, edges: Var) -> Result<Var> {
    let k = tape.shape(nodes)[0];
    let pairs = edge_pairs(k);
    let src: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let dst: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ni = tape.gather_rows(nodes, &src)?;
    let nj = tape.gather_rows(nodes, &dst)?;
    tape.concat_cols(&[ni, edges, nj])
}

pub struct StreamOutput {
    /// Normalized encoder output (3D) or visual projection (oracle), before
    /// any reasoning layer.
    pub node_init: Var,
    pub nodes: Var,
    pub edges: Option<Var>,
    pub object_logits: Var,
    /// `E × N_rel`, absent when the scene has fewer than two instances.
    pub predicate_logits: Option<Var>,
}

pub struct OracleOutput {
    pub stream: StreamOutput,
    /// Fused triplet embeddings `E × D_emb`.
    pub fused: Option<Var>,
    pub mask: Var,
    /// Node-level cross-attention weights, per layer then per head.
    pub node_attention: Vec<Vec<Var>>,
    pub edge_attention: Vec<Vec<Var>>,
}

pub struct ForwardOutput {
    pub threed: StreamOutput,
    pub oracle: Option<OracleOutput>,
}

/// All parameters plus the handles that index into them.
#[derive(Clone, Debug)]
pub struct SceneGraphModel {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub params: ParamStore,
    pub node_encoder: NodeEncoder,
    pub edge_encoder: EdgeEncoder,
    pub threed: Stream,
    pub oracle: OracleBranch,
}

impl SceneGraphModel {
    /// Randomly initialized model. 3D parameters are drawn first, so they do
    /// not depend on the oracle branch.
    pub fn new(config: ModelConfig, dims: ModelDims) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut s = ParamStore::new();
        let (d, h) = (config.d, config.hidden);
        let node_encoder = NodeEncoder::new(&mut s, "threed.node_encoder", h, d, &mut rng)?;
        let edge_encoder = EdgeEncoder::new(&mut s, "threed.edge_encoder", h, d, &mut rng)?;
        let threed = Stream::new(&mut s, "threed", &config, &dims, &mut rng)?;
        let visual = VisualProjection::new(&mut s, "oracle.visual", dims.d_vis, d, &mut rng)?;
        let oracle_edges = EdgeEncoder::new(&mut s, "oracle.edge_encoder", h, d, &mut rng)?;
        let stream = Stream::new(&mut s, "oracle", &config, &dims, &mut rng)?;
        let mut node_collab = Vec::new();
        let mut edge_collab = Vec::new();
        for l in 0..config.layers {
            node_collab.push(Attention::new(&mut s, &format!("collab.layer{l}.node"), d, config.heads, &mut rng)?);
            edge_collab.push(Attention::new(&mut s, &format!("collab.layer{l}.edge"), d, config.heads, &mut rng)?);
        }
        let mask = DistanceMask::new(&mut s, "collab.mask", h, &mut rng)?;
        let fuse = Linear::new(&mut s, "oracle.fuse", 3 * d, dims.d_emb, true, &mut rng)?;
        Ok(Self {
            config,
            dims,
            params: s,
            node_encoder,
            edge_encoder,
            threed,
            oracle: OracleBranch {
                visual,
                edge_encoder: oracle_edges,
                stream,
                node_collab,
                edge_collab,
                mask,
                fuse,
            },
        })
    }

    /// Parameters used at inference time.
    pub fn threed_params(&self) -> Vec<ParamId> {
        let mut v = self.node_encoder.params();
        v.extend(self.edge_encoder.params());
        v.extend(self.threed.params());
        v
    }

    /// Parameters used only while training in joint mode.
    pub fn oracle_params(&self) -> Vec<ParamId> {
        let o = &self.oracle;
        let mut v = o.visual.params();
        v.extend(o.edge_encoder.params());
        v.extend(o.stream.params());
        v.extend(o.node_collab.iter().chain(&o.edge_collab).flat_map(Attention::params));
        v.extend(o.mask.params());
        v.extend(o.fuse.params());
        v
    }

    pub fn forward(&self, tape: &mut Tape, scene: &SceneGraphSample, mode: Mode) -> Result<ForwardOutput> {
        let attrs = scene.attributes()?;
        self.forward_with(tape, scene, &attrs, mode)
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape,
        scene: &SceneGraphSample,
        attrs: &[InstanceAttributes],
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let store = &self.params;
        if scene.instances.is_empty() {
            return Err(Error::Contract(format!("scene '{}' has no instances", scene.scene_id)));
        }
        let visual = match mode {
            Mode::ThreeDOnly => None,
            Mode::Joint => Some(scene.visual_features.as_ref().ok_or_else(|| {
                Error::Contract(format!("joint mode needs visual features for scene '{}'", scene.scene_id))
            })?),
        };
        let pts: Vec<_> = scene.instances.iter().zip(attrs).map(|(i, a)| (i.points.as_slice(), a)).collect();
        let th_init = self.node_encoder.forward(tape, store, &pts)?;
        let th_init = tape.layer_norm(th_init, INPUT_NORM_EPS)?;
        let mut th_n = th_init;
        let th_e = self.edge_encoder.forward(tape, store, attrs)?;
        let mut th_e = normalize_rows(tape, th_e)?;

        let mut oracle = match visual {
            Some(v) => {
                let o = &self.oracle;
                let init = o.visual.forward(tape, store, v)?;
                let edges = o.edge_encoder.forward(tape, store, attrs)?;
                let edges = normalize_rows(tape, edges)?;
                let mask = o.mask.forward(tape, store, attrs)?;
                Some((init, init, edges, mask, Vec::new(), Vec::new()))
            }
            None => None,
        };

        for (l, layer) in self.threed.layers.iter().enumerate() {
            if let Some((_, or_n, _, mask, node_att, _)) = oracle.as_mut() {
                let a = self.oracle.node_collab[l].forward(tape, store, *or_n, th_n, Some(*mask))?;
                *or_n = a.out;
                node_att.push(a.weights);
            }
            th_n = layer.mhsa.forward(tape, store, th_n, th_n, None)?.out;
            (th_n, th_e) = layer.gnn.forward(tape, store, th_n, th_e)?;
            if let Some((_, or_n, or_e, _, _, edge_att)) = oracle.as_mut() {
                let ol = &self.oracle.stream.layers[l];
                *or_n = ol.mhsa.forward(tape, store, *or_n, *or_n, None)?.out;
                (*or_n, *or_e) = ol.gnn.forward(tape, store, *or_n, *or_e)?;
                if let (Some(oe), Some(te)) = (*or_e, th_e) {
                    let a = self.oracle.edge_collab[l].forward(tape, store, oe, te, None)?;
                    *or_e = Some(a.out);
                    edge_att.push(a.weights);
                }
            }
        }

        let threed = heads(tape, store, &self.threed, th_init, th_n, th_e)?;
        let oracle = match oracle {
            Some((init, n, e, mask, node_attention, edge_attention)) => {
                let stream = heads(tape, store, &self.oracle.stream, init, n, e)?;
                let fused = match e {
                    Some(e) => {
                        let x = triplet_features(tape, n, e)?;
                        Some(self.oracle.fuse.forward(tape, store, x)?)
                    }
                    None => None,
                };
                Some(OracleOutput {
                    stream,
                    fused,
                    mask,
                    node_attention,
                    edge_attention,
                })
            }
            None => None,
        };
        Ok(ForwardOutput { threed, oracle })
    }
}

fn heads(
    tape: &mut Tape,
    store: &ParamStore,
    s: &Stream,
    node_init: Var,
    nodes: Var,
    edges: Option<Var>,
) -> Result<StreamOutput> {
    let object_logits = s.object_classifier.forward(tape, store, nodes)?;
    let predicate_logits = match edges {
        Some(e) => {
            let x = triplet_features(tape, nodes, e)?;
            Some(s.predicate_classifier.forward(tape, store, x)?)
        }
        None => None,
    };
    Ok(StreamOutput {
        node_init,
        nodes,
        edges,
        object_logits,
        predicate_logits,
    })
}
