//! Versioned, checksummed model checkpoints.
//!
//! A checkpoint file has two lines: a small JSON header carrying the
//! format tag, version and SHA-256 of the second line, then the JSON payload.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use styledial_core::corpus_gen::CORPUS_VERSION;
use styledial_core::dialogue_core::Style;
use styledial_core::model::{MarkerIds, StyleDialModel};
use styledial_core::numerics::Tensor;
use styledial_core::seq2seq::ModelConfig;
use styledial_core::trainer::{TrainConfig, TrainState};

use crate::formats::{sha256_hex, write_atomic};

pub const CHECKPOINT_FORMAT: &str = "styledial-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Weights of one model plus what is needed to rebuild its graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub model_config: ModelConfig,
    pub latent_fusion: bool,
    pub markers: MarkerIds,
    pub params: Vec<NamedTensor>,
}

impl ModelWeights {
    pub fn capture(model: &StyleDialModel) -> Self {
        Self {
            model_config: model.config().clone(),
            latent_fusion: model.latent_fusion(),
            markers: model.markers(),
            params: model
                .store
                .iter()
                .map(|(_, p)| NamedTensor {
                    name: p.name.clone(),
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds the model. Every parameter of the graph must be present
    /// with its exact shape, and nothing else may be.
    pub fn restore(&self) -> Result<StyleDialModel> {
        let mut model = StyleDialModel::new(&self.model_config, self.latent_fusion, self.markers, 0)?;
        if model.store.len() != self.params.len() {
            bail!(
                "checkpoint has {} parameters, the configured model has {}",
                self.params.len(),
                model.store.len()
            );
        }
        let mut seen = BTreeSet::new();
        for nt in &self.params {
            let id = model
                .store
                .find(&nt.name)
                .with_context(|| format!("checkpoint parameter {} is not part of the model", nt.name))?;
            if !seen.insert(nt.name.as_str()) {
                bail!("parameter {} appears twice", nt.name);
            }
            // Re-validates the length against the shape.
            let t = Tensor::new(nt.value.shape(), nt.value.data().to_vec())?;
            model.store.set(id, t)?;
        }
        Ok(model)
    }
}

/// Training snapshot at an epoch boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub corpus_version: u32,
    pub corpus_checksum: String,
    pub vocab_checksum: String,
    pub config: TrainConfig,
    /// Model after the last finished epoch.
    pub last: ModelWeights,
    /// Model of the best dev epoch so far.
    pub best: ModelWeights,
    pub state: TrainState,
    /// Per-style mean training posterior mean of `best`, once computed.
    pub centroids: Option<Vec<(Style, Vec<f64>)>>,
}

impl Checkpoint {
    pub fn new(
        corpus_checksum: &str,
        vocab_checksum: &str,
        config: &TrainConfig,
        last: &StyleDialModel,
        best: &StyleDialModel,
        state: &TrainState,
        centroids: Option<&BTreeMap<Style, Vec<f64>>>,
    ) -> Self {
        Self {
            corpus_version: CORPUS_VERSION,
            corpus_checksum: corpus_checksum.to_string(),
            vocab_checksum: vocab_checksum.to_string(),
            config: config.clone(),
            last: ModelWeights::capture(last),
            best: ModelWeights::capture(best),
            state: state.clone(),
            centroids: centroids.map(|c| c.iter().map(|(s, v)| (*s, v.clone())).collect()),
        }
    }

    pub fn centroid_map(&self) -> Option<BTreeMap<Style, Vec<f64>>> {
        self.centroids.as_ref().map(|c| c.iter().cloned().collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload = serde_json::to_vec(self)?;
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            sha256: sha256_hex(&payload),
        };
        let mut out = serde_json::to_vec(&header)?;
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .context("checkpoint has no header line")?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).context("checkpoint header")?;
        if header.format != CHECKPOINT_FORMAT {
            bail!("not a checkpoint (format tag {:?})", header.format);
        }
        if header.version != CHECKPOINT_VERSION {
            bail!(
                "checkpoint version {}, this build reads version {CHECKPOINT_VERSION}",
                header.version
            );
        }
        let mut payload = &bytes[nl + 1..];
        if payload.last() == Some(&b'\n') {
            payload = &payload[..payload.len() - 1];
        }
        if sha256_hex(payload) != header.sha256 {
            bail!("checkpoint checksum mismatch; the file is corrupt");
        }
        let ck: Checkpoint = serde_json::from_slice(payload).context("checkpoint payload")?;
        if ck.corpus_version != CORPUS_VERSION {
            bail!(
                "checkpoint was trained on corpus format {}, this build uses {CORPUS_VERSION}",
                ck.corpus_version
            );
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("loading {}", path.display()))
    }
}
