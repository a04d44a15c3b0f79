//! A small laboratory for studying what a text classifier actually relies on.
//!
//! The pipeline: train a deep-averaging classifier with exact analytic
//! gradients ([`model`]), score per-token importance by leave-one-out or by
//! input gradient ([`importance`]), iteratively delete the least important
//! tokens while the prediction holds ([`reduction`]), then fine-tune with an
//! entropy objective on the reduced inputs so the model stops being confident
//! on them ([`regularize`]). [`analysis`] aggregates the results into length
//! histograms, confidence densities, and per-step heatmap traces.
//!
//! Everything is deterministic given a seed: training, search, sampling, and
//! report emission all reproduce byte-identical artifacts.

pub mod analysis;
pub mod corpus;
pub mod importance;
pub mod model;
pub mod reduction;
pub mod regularize;
pub mod stats;
pub mod synth;

use serde::{Deserialize, Serialize};

/// Provenance stamp embedded in every artifact file the pipeline writes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
}

impl ArtifactMeta {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        ArtifactMeta {
            config_hash: config_hash.into(),
            seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}
