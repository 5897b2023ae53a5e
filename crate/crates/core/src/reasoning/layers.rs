//! Message passing and attention blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp2};
use crate::scene::{edge_pairs, InstanceAttributes};
use crate::tensor::{Axis, ParamId, ParamStore, Tape, Tensor, Var};

/// Gated node/edge message passing over all ordered pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FatGnn {
    pub message: Linear,
    pub gate: Linear,
    pub edge_out: Linear,
    pub node_out: Linear,
}

impl FatGnn {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            message: Linear::new(store, &format!("{name}.message"), 3 * d, d, true, rng)?,
            gate: Linear::new(store, &format!("{name}.gate"), d, d, true, rng)?,
            edge_out: Linear::new(store, &format!("{name}.edge_out"), d, d, false, rng)?,
            node_out: Linear::new(store, &format!("{name}.node_out"), d, d, false, rng)?,
        })
    }

    /// One residual update. With no edges (`K < 2`) nodes pass through untouched.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        nodes: Var,
        edges: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let Some(edges) = edges else {
            return Ok((nodes, None));
        };
        let k = tape.shape(nodes)[0];
        let pairs = edge_pairs(k);
        if tape.shape(edges)[0] != pairs.len() {
            return Err(Error::dim(
                "fat_gnn_layer",
                format!("{} edge rows for K={k}", tape.shape(edges)[0]),
            ));
        }
        let src: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let dst: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let ni = tape.gather_rows(nodes, &src)?;
        let nj = tape.gather_rows(nodes, &dst)?;
        let x = tape.concat_cols(&[ni, edges, nj])?;
        let m = self.message.forward(tape, store, x)?;
        let g = self.gate.forward(tape, store, m)?;
        let g = tape.sigmoid(g)?;
        let gm = tape.mul(g, m)?;
        let de = self.edge_out.forward(tape, store, gm)?;
        let edges = tape.add(edges, de)?;
        // mean over outgoing edges as a constant K×E averaging matrix
        let e = pairs.len();
        let mut avg = vec![0.0; k * e];
        let w = 1.0 / (k - 1) as f64;
        for (idx, &(i, _)) in pairs.iter().enumerate() {
            avg[i * e + idx] = w;
        }
        let avg = tape.constant(Tensor::matrix(k, e, avg)?)?;
        let agg = tape.matmul(avg, gm)?;
        let dn = self.node_out.forward(tape, store, agg)?;
        let nodes = tape.add(nodes, dn)?;
        Ok((nodes, Some(edges)))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.message, &self.gate, &self.edge_out, &self.node_out]
            .iter()
            .flat_map(|l| l.params())
            .collect()
    }
}

/// Multi-head attention with bias-free Q/K/V/O projections and a residual
/// connection onto the queries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Post-softmax weights, one `queries × keys` matrix per head.
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, false, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, false, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, false, rng)?,
            heads,
        })
    }

    /// `queries + O·softmax(QKᵀ/√d_h + mask)·V`, the mask shared over heads.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        context: Var,
        mask: Option<Var>,
    ) -> Result<AttentionOutput> {
        let (qs, cs) = (tape.shape(queries).to_vec(), tape.shape(context).to_vec());
        if qs.len() != 2 || cs.len() != 2 || qs[1] != self.q.d_in || cs[1] != self.k.d_in {
            return Err(Error::dim("attention", format!("queries {qs:?}, context {cs:?}")));
        }
        if let Some(m) = mask {
            if tape.shape(m) != [qs[0], cs[0]] {
                return Err(Error::dim(
                    "attention",
                    format!("mask {:?} for {}×{}", tape.shape(m), qs[0], cs[0]),
                ));
            }
        }
        let q = self.q.forward(tape, store, queries)?;
        let k = self.k.forward(tape, store, context)?;
        let v = self.v.forward(tape, store, context)?;
        let dh = self.q.d_out / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let logits = tape.matmul(qh, kt)?;
            let mut logits = tape.scale(logits, scale)?;
            if let Some(m) = mask {
                logits = tape.add(logits, m)?;
            }
            let a = tape.softmax(logits, Axis::Cols)?;
            outs.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = tape.concat_cols(&outs)?;
        let o = self.o.forward(tape, store, cat)?;
        let out = tape.add(queries, o)?;
        Ok(AttentionOutput { out, weights })
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.params()).collect()
    }
}

/// Learned additive bias on node-level cross-attention logits, from the
/// offset and distance between instance means.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DistanceMask {
    pub mlp: Mlp2,
}

impl DistanceMask {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mlp: Mlp2::new(store, name, 4, hidden, 1, rng)?,
        })
    }

    /// Rows `(μi−μj, ‖μi−μj‖)` for every ordered pair, diagonal included.
    pub fn inputs(attrs: &[InstanceAttributes]) -> Tensor {
        let k = attrs.len();
        let mut flat = Vec::with_capacity(k * k * 4);
        for a in attrs {
            for b in attrs {
                let d = [0, 1, 2].map(|x| a.mean[x] - b.mean[x]);
                flat.extend(d);
                flat.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
            }
        }
        Tensor::matrix(k * k, 4, flat).expect("k*k*4 entries")
    }

    /// `K × K` mask matrix.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, attrs: &[InstanceAttributes]) -> Result<Var> {
        let k = attrs.len();
        if k == 0 {
            return Err(Error::Contract("distance mask needs at least one instance".into()));
        }
        let x = tape.constant(Self::inputs(attrs))?;
        let d = self.mlp.forward(tape, store, x)?;
        tape.reshape(d, &[k, k])
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

/// `x · Wᵀ + b` with `W` stored row-per-class (`classes × in`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Classifier {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
    pub d_in: usize,
}

impl Classifier {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, classes: usize, rng: &mut R) -> Result<Self> {
        // rows are classes, so scale by the input width rather than the row count
        let std = 1.0 / (d_in as f64).sqrt();
        let normal = rand_distr::Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f64> = (0..classes * d_in).map(|_| rng.sample(normal)).collect();
        let weight = store.insert(format!("{name}.weight"), Tensor::matrix(classes, d_in, data)?)?;
        let bias = store.insert_zeros(format!("{name}.bias"), &[1, classes])?;
        Ok(Self {
            weight,
            bias,
            classes,
            d_in,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight)?;
        let wt = tape.transpose(w)?;
        let y = tape.matmul(x, wt)?;
        let b = tape.param(store, self.bias)?;
        tape.add_row(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}
