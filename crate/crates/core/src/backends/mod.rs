//! The model-backend contract and its implementations.
//!
//! Everything that learns or answers lives behind [`Backend`]; the trainer and
//! evaluator only see text in and text out. Three implementations ship here:
//! a memorizing mock for deterministic pipeline runs, a scripted replayer, and
//! a client for chat-completion style vision endpoints.

mod mock;
mod remote;
mod scripted;
#[cfg(feature = "testing")]
pub mod stub;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{LoadRecord, MemorizingBackend, TrainCall, FALLBACK_ANSWER};
pub use remote::{RemoteClient, RemoteConfig};
pub use scripted::{ScriptReply, ScriptedBackend};

/// Which transformer modules and layers receive adapters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetLayers {
    pub modules: Vec<String>,
    /// `None` selects every layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_indices: Option<Vec<u32>>,
}

impl Default for TargetLayers {
    fn default() -> Self {
        Self {
            modules: ["q_proj", "k_proj", "v_proj", "o_proj"].map(String::from).to_vec(),
            layer_indices: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: u32,
    pub alpha: f64,
    #[serde(default)]
    pub target_layer_selector: TargetLayers,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_dropout() -> f64 {
    0.05
}

impl Default for LoraConfig {
    /// Rank 8, alpha 16 on the attention projections.
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            target_layer_selector: TargetLayers::default(),
            dropout: default_dropout(),
        }
    }
}

impl LoraConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.rank < 1 {
            return Err("lora rank must be at least 1".into());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err("lora alpha must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("lora dropout must be in [0, 1)".into());
        }
        Ok(())
    }

    /// Name of the first field that differs from `other`.
    pub fn first_difference(&self, other: &LoraConfig) -> Option<&'static str> {
        if self.rank != other.rank {
            Some("rank")
        } else if self.alpha != other.alpha {
            Some("alpha")
        } else if self.target_layer_selector != other.target_layer_selector {
            Some("target_layer_selector")
        } else if self.dropout != other.dropout {
            Some("dropout")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub trainable: bool,
    pub supports_adapter_merge: bool,
    pub max_image_pixels: Option<u64>,
}

/// One completed training stage, as recorded in an adapter's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: String,
    pub recipe_digest: String,
    pub config_digest: String,
}

/// Metadata of a saved adapter directory.
///
/// Layout: `adapter_weights.json` holds the weights, `adapter_meta.json`
/// holds this struct minus `path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    #[serde(skip)]
    pub path: PathBuf,
    pub backend: String,
    pub lora: LoraConfig,
    pub lineage: Vec<LineageEntry>,
    pub step_count: u64,
}

pub const ADAPTER_WEIGHTS_FILE: &str = "adapter_weights.json";
pub const ADAPTER_META_FILE: &str = "adapter_meta.json";

impl AdapterCheckpoint {
    pub fn weights_path(&self) -> PathBuf {
        self.path.join(ADAPTER_WEIGHTS_FILE)
    }

    pub fn read(dir: &Path) -> Result<AdapterCheckpoint, BackendError> {
        let meta = dir.join(ADAPTER_META_FILE);
        let bytes = fs::read(&meta).map_err(|source| BackendError::Io {
            path: meta.clone(),
            source,
        })?;
        let mut ckpt: AdapterCheckpoint =
            serde_json::from_slice(&bytes).map_err(|e| BackendError::Format(format!("{}: {e}", meta.display())))?;
        if ckpt.lineage.is_empty() {
            return Err(BackendError::Format(format!("{}: empty lineage", meta.display())));
        }
        ckpt.path = dir.to_path_buf();
        Ok(ckpt)
    }

    pub(crate) fn write_meta(&self) -> Result<(), BackendError> {
        let meta = self.path.join(ADAPTER_META_FILE);
        let mut bytes = serde_json::to_vec_pretty(self).expect("checkpoint metadata serializes");
        bytes.push(b'\n');
        fs::write(&meta, bytes).map_err(|source| BackendError::Io { path: meta, source })
    }
}

/// A screenshot reference with its known size.
#[derive(Debug, Clone, Copy)]
pub struct ImageRef<'a> {
    pub uri: &'a str,
    pub width: u32,
    pub height: u32,
}

/// One micro-batch element.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainItem {
    pub prompt: String,
    pub target: String,
    pub image_ref: String,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport error after {retries} retries: {message}")]
    Transport { message: String, retries: u32 },
    #[error("request timed out after {retries} retries")]
    Timeout { retries: u32 },
    #[error("capability error: {0}")]
    Capability(String),
    #[error("scripted reply queue exhausted")]
    QueueExhausted,
    #[error("adapter config mismatch in `{field}`")]
    ConfigMismatch { field: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
}

impl BackendError {
    /// Failures of the transport to produce an answer at all.
    pub fn is_transport(&self) -> bool {
        matches!(self, BackendError::Transport { .. } | BackendError::Timeout { .. })
    }
}

/// A grounding model. `predict` may be called concurrently; training calls
/// take `&mut self` and are strictly sequential.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn capabilities(&self) -> BackendCapabilities;

    /// Raw answer text for one query, verbatim.
    fn predict(&self, image: &ImageRef<'_>, instruction: &str) -> Result<String, BackendError>;

    /// Forward/backward over one micro-batch; returns its loss. Gradients
    /// accumulate until [`Backend::commit_step`].
    fn train_step(&mut self, _batch: &[TrainItem], _lr: f64) -> Result<f64, BackendError> {
        Err(self.not_trainable())
    }

    /// Apply accumulated gradients; returns the new optimizer step count.
    fn commit_step(&mut self) -> Result<u64, BackendError> {
        Err(self.not_trainable())
    }

    fn step_count(&self) -> u64 {
        0
    }

    /// Append a completed stage to the adapter lineage.
    fn record_stage(&mut self, _entry: LineageEntry) -> Result<(), BackendError> {
        Err(self.not_trainable())
    }

    fn save_adapter(&self, _dir: &Path) -> Result<AdapterCheckpoint, BackendError> {
        Err(self.not_trainable())
    }

    fn load_adapter(&mut self, _ckpt: &AdapterCheckpoint) -> Result<(), BackendError> {
        Err(self.not_trainable())
    }

    fn lora(&self) -> Option<&LoraConfig> {
        None
    }

    fn not_trainable(&self) -> BackendError {
        BackendError::Capability(format!("backend `{}` is not trainable", self.name()))
    }

    /// Reject images larger than the advertised pixel budget.
    fn check_image(&self, image: &ImageRef<'_>) -> Result<(), BackendError> {
        if let Some(max) = self.capabilities().max_image_pixels {
            let px = u64::from(image.width) * u64::from(image.height);
            if px > max {
                return Err(BackendError::Capability(format!(
                    "image {} has {px} pixels, limit is {max}",
                    image.uri
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_lora_is_rank8_alpha16() {
        let l = LoraConfig::default();
        assert_eq!(l.rank, 8);
        assert_eq!(l.alpha, 16.0);
        assert!(l.check().is_ok());
    }

    #[test]
    fn lora_checks() {
        let d = LoraConfig::default();
        assert!(LoraConfig { rank: 0, ..d.clone() }.check().is_err());
        assert!(LoraConfig {
            alpha: 0.0,
            ..d.clone()
        }
        .check()
        .is_err());
        assert!(LoraConfig { dropout: 1.0, ..d }.check().is_err());
    }

    #[test]
    fn lora_difference_names_field() {
        let a = LoraConfig::default();
        let mut b = a.clone();
        b.rank = 16;
        assert_eq!(a.first_difference(&b), Some("rank"));
        assert_eq!(a.first_difference(&a), None);
    }
}
