//! Prediction dumps: per-scene probabilities plus ground truth, as JSON lines
//! (a header line followed by one line per scene).

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{edge_index, edge_pairs};

/// Tolerance on object probability rows summing to one.
pub const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpHeader {
    pub tool_version: String,
    pub config_hash: String,
    pub vocab_hash: String,
    pub n_obj: usize,
    pub n_rel: usize,
    /// Which model produced the dump, e.g. `vlsat` or `baseline`.
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenePrediction {
    pub scene_id: String,
    /// `K × N_obj`, rows are softmax distributions.
    pub object_probs: Vec<Vec<f64>>,
    /// `E × N_rel` in subject-major ordered-pair order, independent sigmoids.
    pub predicate_probs: Vec<Vec<f64>>,
    pub gt_objects: Vec<usize>,
    /// Ground-truth `(subject, predicate, object)` instance-index triples.
    pub gt_relations: Vec<(usize, usize, usize)>,
}

impl ScenePrediction {
    pub fn k(&self) -> usize {
        self.gt_objects.len()
    }

    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        &self.predicate_probs[edge_index(self.k(), i, j)]
    }

    pub fn validate(&self, n_obj: usize, n_rel: usize) -> Result<()> {
        let bad = |d: String| Err(Error::Data(format!("scene '{}': {d}", self.scene_id)));
        let k = self.k();
        if self.object_probs.len() != k {
            return bad(format!("{} object rows for {k} instances", self.object_probs.len()));
        }
        for row in &self.object_probs {
            if row.len() != n_obj || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad("object row has wrong width or values outside [0, 1]".into());
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return bad(format!("object row sums to {s}"));
            }
        }
        if self.predicate_probs.len() != edge_pairs(k).len() {
            return bad(format!("{} predicate rows for K={k}", self.predicate_probs.len()));
        }
        if self
            .predicate_probs
            .iter()
            .any(|r| r.len() != n_rel || r.iter().any(|p| !(0.0..=1.0).contains(p)))
        {
            return bad("predicate row has wrong width or values outside [0, 1]".into());
        }
        if self.gt_objects.iter().any(|&c| c >= n_obj) {
            return bad("ground-truth object label out of range".into());
        }
        for &(i, p, j) in &self.gt_relations {
            if i >= k || j >= k || i == j || p >= n_rel {
                return bad(format!("invalid ground-truth relation ({i}, {p}, {j})"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionDump {
    pub header: DumpHeader,
    pub scenes: Vec<ScenePrediction>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderLine {
    header: DumpHeader,
}

impl PredictionDump {
    pub fn validate(&self) -> Result<()> {
        self.scenes
            .iter()
            .try_for_each(|s| s.validate(self.header.n_obj, self.header.n_rel))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let header = HeaderLine {
            header: self.header.clone(),
        };
        writeln!(f, "{}", serde_json::to_string(&header)?).map_err(io)?;
        for s in &self.scenes {
            writeln!(f, "{}", serde_json::to_string(s)?).map_err(io)?;
        }
        f.flush().map_err(io)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty dump", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: HeaderLine = serde_json::from_str(&first)
            .map_err(|e| Error::Data(format!("{}:1: bad dump header: {e}", path.display())))?;
        let mut scenes = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let s: ScenePrediction = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 2)))?;
            scenes.push(s);
        }
        let dump = Self {
            header: header.header,
            scenes,
        };
        dump.validate()?;
        Ok(dump)
    }
}
