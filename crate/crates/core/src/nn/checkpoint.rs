//! Checkpoint files: a JSON descriptor next to a raw little-endian f32 payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::hash::sha256_hex;
use crate::nn::params::Layout;
use crate::nn::spec::ModelSpec;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: usize,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    #[serde(default)]
    pub dataset_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub params: Vec<f32>,
    pub history: TrainingHistory,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    spec: ModelSpec,
    layout: Layout,
    param_count: usize,
    payload_sha256: String,
    history: TrainingHistory,
}

fn sidecars(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("f32"))
}

pub(crate) fn f32s_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn le_to_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl ModelCheckpoint {
    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Write `<base>.json` and `<base>.f32`.
    pub fn save(&self, base: impl AsRef<Path>) -> Result<()> {
        let (json, payload) = sidecars(base.as_ref());
        let bytes = f32s_to_le(&self.params);
        let desc = Descriptor {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            param_count: self.params.len(),
            payload_sha256: sha256_hex(&bytes),
            history: self.history.clone(),
        };
        fs::write(&payload, &bytes).at(&payload)?;
        fs::write(&json, serde_json::to_vec_pretty(&desc)?).at(&json)?;
        Ok(())
    }

    pub fn load(base: impl AsRef<Path>) -> Result<Self> {
        let (json, payload) = sidecars(base.as_ref());
        let desc: Descriptor = serde_json::from_slice(&fs::read(&json).at(&json)?)?;
        let bytes = fs::read(&payload).at(&payload)?;
        let expected = desc.param_count as u64 * 4;
        if bytes.len() as u64 != expected {
            return Err(Error::PayloadLength {
                path: payload,
                expected,
                actual: bytes.len() as u64,
            });
        }
        if sha256_hex(&bytes) != desc.payload_sha256 {
            return Err(Error::Metadata {
                path: json,
                reason: "payload hash does not match descriptor".into(),
            });
        }
        let (_, layout) = desc.spec.build()?;
        if layout != desc.layout || layout.len() != desc.param_count {
            return Err(Error::Metadata {
                path: json,
                reason: "layout does not match the model spec".into(),
            });
        }
        let ckpt = ModelCheckpoint {
            spec: desc.spec,
            layout: desc.layout,
            params: le_to_f32s(&bytes),
            history: desc.history,
        };
        if !ckpt.is_finite() {
            return Err(Error::NonFinite(format!("checkpoint {}", payload.display())));
        }
        Ok(ckpt)
    }
}
