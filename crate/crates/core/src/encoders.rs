//! Feature encoders feeding the reasoning stack.
//!
//! - [`NodeEncoder`]: shared per-point MLP, max-pool over points, linear to `D`.
//! - [`EdgeEncoder`]: MLP over the 11-wide geometric pair descriptor.
//! - [`VisualProjection`]: learnable linear map from pooled visual features
//!   to the oracle node width.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp2};
use crate::scene::{edge_pairs, InstanceAttributes, Point};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Width of the pair descriptor fed to the edge encoder.
pub const EDGE_DESCRIPTOR_WIDTH: usize = 11;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeEncoder {
    pub point_mlp: Mlp2,
    pub out: Linear,
}

impl NodeEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            point_mlp: Mlp2::new(store, &format!("{name}.point_mlp"), 3, hidden, hidden, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, d, true, rng)?,
        })
    }

    /// Encodes every instance of a scene into a `K × D` matrix.
    ///
    /// Points are centred on their instance mean before the shared MLP; the
    /// mean comes from [`InstanceAttributes`], which is order independent, so
    /// the output is exactly invariant to point order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        instances: &[(&[Point], &InstanceAttributes)],
    ) -> Result<Var> {
        let mut flat = Vec::new();
        let mut ranges = Vec::with_capacity(instances.len());
        for (points, attr) in instances {
            if points.is_empty() {
                return Err(Error::Contract("node encoder needs at least one point".into()));
            }
            let start = flat.len() / 3;
            for p in *points {
                flat.extend((0..3).map(|a| p[a] - attr.mean[a]));
            }
            ranges.push(start..flat.len() / 3);
        }
        let n = flat.len() / 3;
        let pts = tape.constant(Tensor::matrix(n, 3, flat)?)?;
        let h = self.point_mlp.forward(tape, store, pts)?;
        let h = tape.relu(h)?;
        let mut pooled = Vec::with_capacity(ranges.len());
        for r in ranges {
            let idx: Vec<usize> = r.collect();
            let rows = tape.gather_rows(h, &idx)?;
            pooled.push(tape.max_rows(rows)?);
        }
        let pooled = tape.concat_rows(&pooled)?;
        self.out.forward(tape, store, pooled)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.point_mlp.params();
        v.extend(self.out.params());
        v
    }
}

/// Raw pair descriptor of subject `i` relative to object `j`:
/// `(μi−μj, σi−σj, bi−bj, ln(li/lj), ln(vi/vj))`.
pub fn edge_descriptor(i: &InstanceAttributes, j: &InstanceAttributes) -> Result<[f64; EDGE_DESCRIPTOR_WIDTH]> {
    let mut x = [0.0; EDGE_DESCRIPTOR_WIDTH];
    for a in 0..3 {
        x[a] = i.mean[a] - j.mean[a];
        x[3 + a] = i.std[a] - j.std[a];
        x[6 + a] = i.bbox[a] - j.bbox[a];
    }
    x[9] = i.max_side.ln() - j.max_side.ln();
    x[10] = i.volume.ln() - j.volume.ln();
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "edge_descriptor" });
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeEncoder {
    pub mlp: Mlp2,
}

impl EdgeEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mlp: Mlp2::new(store, &format!("{name}.mlp"), EDGE_DESCRIPTOR_WIDTH, hidden, d, rng)?,
        })
    }

    /// `E × D` edge features in [`edge_pairs`] order, or `None` when `K < 2`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, attrs: &[InstanceAttributes]) -> Result<Option<Var>> {
        let pairs = edge_pairs(attrs.len());
        if pairs.is_empty() {
            return Ok(None);
        }
        let mut flat = Vec::with_capacity(pairs.len() * EDGE_DESCRIPTOR_WIDTH);
        for (i, j) in &pairs {
            flat.extend(edge_descriptor(&attrs[*i], &attrs[*j])?);
        }
        let x = tape.constant(Tensor::matrix(pairs.len(), EDGE_DESCRIPTOR_WIDTH, flat)?)?;
        self.mlp.forward(tape, store, x).map(Some)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.mlp.params()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VisualProjection {
    pub proj: Linear,
}

impl VisualProjection {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_vis: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), d_vis, d, true, rng)?,
        })
    }

    /// Projects `K × D_vis` visual rows to `K × D` oracle node features.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, visual: &[Vec<f64>]) -> Result<Var> {
        let width = self.proj.d_in;
        if visual.is_empty() || visual.iter().any(|r| r.len() != width) {
            return Err(Error::dim("encode_node_oracle", format!("visual rows must have width {width}")));
        }
        let x = tape.constant(Tensor::matrix(visual.len(), width, visual.concat())?)?;
        self.proj.forward(tape, store, x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.proj.params()
    }
}
