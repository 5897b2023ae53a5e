//! Seeded synthetic scenes with long-tailed predicates, plus the surrogate
//! embedding provider that stands in for pretrained vision/text encoders.
//!
//! Geometric predicates are fully determined by where a smaller subject sits
//! relative to a larger object. Semantic predicates share a geometric region
//! with a head predicate and are decided by a hidden per-instance state. The
//! state is visible in the pooled visual features and only weakly in the
//! point cloud (a pair of cut-away box corners).

mod config;
mod generate;
mod manifest;
mod provider;

pub use config::{SemanticBinding, WorldConfig};
pub use generate::{
    derive_seed, generate_dataset, separability_report, visual_features, zipf_quota, GeneratedDataset,
    GeometryThresholds, SeparabilityReport, VisualOptions,
};
pub use manifest::{
    frequencies, load_dataset, read_manifest, write_dataset, DatasetManifest, FrequencyTable, LoadedDataset,
    MANIFEST_FILE, TRAIN_FILE, VALIDATION_FILE,
};
pub use provider::{EmbeddingProvider, MAX_PAIR_COSINE, TRIPLET_BLEND};
