use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{SemanticBinding, WorldConfig};
use super::generate::{separability_report, GeneratedDataset, GeometryThresholds, SeparabilityReport};
use super::provider::EmbeddingProvider;
use crate::config::{hash_bytes, hash_json};
use crate::error::{Error, Result};
use crate::scene::{
    load_scene_file, split_predicates, LoadOptions, PredicateSplits, SceneGraphSample, Split, Vocabulary,
};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VALIDATION_FILE: &str = "validation.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    pub train: Vec<u64>,
    pub validation: Vec<u64>,
}

/// Sidecar describing a generated dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub config: WorldConfig,
    pub vocabulary: Vocabulary,
    pub vocab_hash: String,
    pub frequency: FrequencyTable,
    pub splits: PredicateSplits,
    pub semantic_predicates: Vec<usize>,
    pub semantic_bindings: Vec<SemanticBinding>,
    pub thresholds: GeometryThresholds,
    /// Every `(subject class, predicate, object class)` seen in training ground truth.
    pub train_triplets: BTreeSet<(usize, usize, usize)>,
    pub separability: SeparabilityReport,
    /// SHA-256 of each emitted scene file.
    pub files: BTreeMap<String, String>,
}

impl DatasetManifest {
    pub fn provider(&self) -> Result<EmbeddingProvider> {
        let c = &self.config;
        EmbeddingProvider::new(c.seed, c.n_obj, c.n_rel, c.n_states, c.d_emb, c.d_state())
    }

    pub fn load_options(&self, strict: bool) -> LoadOptions {
        LoadOptions {
            n_obj: self.vocabulary.n_obj(),
            n_rel: self.vocabulary.n_rel(),
            strict,
        }
    }
}

pub fn frequencies(samples: &[SceneGraphSample], n_rel: usize) -> Vec<u64> {
    let mut f = vec![0u64; n_rel];
    for s in samples {
        for (_, p, _) in s.predicates.relations() {
            f[p] += 1;
        }
    }
    f
}

/// Writes `train.jsonl`, `validation.jsonl` and `manifest.json` into `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &GeneratedDataset) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for (name, samples) in [(TRAIN_FILE, &data.train), (VALIDATION_FILE, &data.validation)] {
        let path = dir.join(name);
        crate::scene::write_scene_file(&path, samples)?;
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        files.insert(name.to_owned(), hash_bytes(&bytes));
    }
    let n_rel = data.config.n_rel;
    let train_triplets = data.train.iter().flat_map(SceneGraphSample::class_triplets).collect();
    let manifest = DatasetManifest {
        tool_version: crate::TOOL_VERSION.to_owned(),
        config_hash: hash_json(&data.config),
        config: data.config.clone(),
        vocab_hash: data.vocabulary.hash(),
        vocabulary: data.vocabulary.clone(),
        frequency: FrequencyTable {
            train: frequencies(&data.train, n_rel),
            validation: frequencies(&data.validation, n_rel),
        },
        splits: split_predicates(&data.vocabulary),
        semantic_predicates: data.config.semantic_set(),
        semantic_bindings: data.config.semantic_bindings(),
        thresholds: data.thresholds.clone(),
        train_triplets,
        separability: separability_report(data),
        files,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<SceneGraphSample>,
    pub validation: Vec<SceneGraphSample>,
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn load_dataset(dir: impl AsRef<Path>, strict: bool) -> Result<LoadedDataset> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let opts = manifest.load_options(strict);
    let train = load_scene_file(dir.join(TRAIN_FILE), opts)?;
    let validation = load_scene_file(dir.join(VALIDATION_FILE), opts)?;
    for (samples, split) in [(&train, Split::Train), (&validation, Split::Validation)] {
        if let Some(bad) = samples.iter().find(|s| s.split != split) {
            return Err(Error::Data(format!(
                "scene '{}' is tagged {} inside the {} file",
                bad.scene_id,
                bad.split.as_str(),
                split.as_str()
            )));
        }
    }
    Ok(LoadedDataset {
        manifest,
        train,
        validation,
    })
}
