//! Versioned checkpoint records and per-phase manifests.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ModelState;
use crate::error::{OltError, Result};
use crate::gates::GateSet;

pub const FORMAT_VERSION: u32 = 1;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Model parameters, init snapshot and mask, optionally with the gate set
/// learned for it and the loss curve of the phase that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub phase: String,
    pub model: ModelState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gates: Option<GateSet>,
    #[serde(default)]
    pub loss_curve: Vec<f64>,
}

impl Checkpoint {
    pub fn new(phase: &str, model: ModelState, gates: Option<GateSet>, loss_curve: Vec<f64>) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            phase: phase.to_string(),
            model,
            gates,
            loss_curve,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(raw)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(OltError::FormatVersion {
                found: ck.format_version,
                expected: FORMAT_VERSION,
            });
        }
        // re-validate shapes and the mask invariant
        let m = ck.model;
        let model = ModelState::from_parts(
            m.config.clone(),
            m.layers().to_vec(),
            m.init_snapshot().to_vec(),
            m.mask().cloned(),
        )?;
        Ok(Checkpoint { model, ..ck })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| OltError::io(path, e))?;
        Checkpoint::from_json(&raw)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub phase: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<f64>,
}

/// A phase directory holding `checkpoint.json` and `manifest.json`.
#[derive(Clone, Debug)]
pub struct PhaseDir {
    pub path: PathBuf,
}

impl PhaseDir {
    pub fn new(root: &Path, phase: &str) -> Self {
        PhaseDir { path: root.join(phase) }
    }

    /// The stored checkpoint when its manifest matches `config_hash`.
    pub fn load_if_current(&self, config_hash: &str) -> Result<Option<Checkpoint>> {
        let manifest_path = self.path.join(MANIFEST_FILE);
        let ck_path = self.path.join(CHECKPOINT_FILE);
        if !manifest_path.exists() || !ck_path.exists() {
            return Ok(None);
        }
        let raw = std::fs::read_to_string(&manifest_path).map_err(|e| OltError::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&raw)?;
        if manifest.config_hash != config_hash || manifest.format_version != FORMAT_VERSION {
            return Ok(None);
        }
        Checkpoint::load(&ck_path).map(Some)
    }

    pub fn store(&self, checkpoint: &Checkpoint, manifest: &Manifest) -> Result<()> {
        std::fs::create_dir_all(&self.path).map_err(|e| OltError::io(&self.path, e))?;
        checkpoint.save(&self.path.join(CHECKPOINT_FILE))?;
        let json = serde_json::to_string_pretty(manifest)?;
        write_file(&self.path.join(MANIFEST_FILE), &json)
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| OltError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| OltError::io(path, e))
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}
