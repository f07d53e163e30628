use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ImageDataset;
use crate::error::{Error, IoContext, Result};
use crate::hash::Fingerprinter;
use crate::nn::checkpoint::{f32s_to_le, le_to_f32s};

/// Per-sample deltas aligned with a specific dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    /// `N x C x H x W`, same order as the dataset.
    pub deltas: Vec<f32>,
    pub shape: [usize; 4],
    /// l-infinity bound on the `[0,1]` pixel scale.
    pub epsilon: f32,
    pub dataset_fingerprint: String,
    pub config_fingerprint: String,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 4],
    epsilon: f32,
    dataset_fingerprint: String,
    config_fingerprint: String,
    seed: u64,
    checksum: String,
}

impl PerturbationSet {
    pub fn zeros(dataset: &ImageDataset, epsilon: f32, config_fingerprint: String, seed: u64) -> Self {
        let [c, h, w] = dataset.shape();
        PerturbationSet {
            deltas: vec![0.0; dataset.images().len()],
            shape: [dataset.len(), c, h, w],
            epsilon,
            dataset_fingerprint: dataset.fingerprint(),
            config_fingerprint,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.shape[0] == 0
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn delta(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.deltas[i * per..(i + 1) * per]
    }

    pub fn max_abs(&self) -> f32 {
        self.deltas.iter().fold(0.0f32, |m, d| m.max(d.abs()))
    }

    /// Shape, bound and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside [0,1]", self.epsilon)));
        }
        let n: usize = self.shape.iter().product();
        if self.deltas.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} deltas for shape {:?}", self.shape),
                actual: self.deltas.len().to_string(),
            });
        }
        if let Some(i) = self.deltas.iter().position(|d| !d.is_finite() || d.abs() > self.epsilon) {
            return Err(Error::InvalidArgument(format!(
                "delta {} at index {i} violates bound {}",
                self.deltas[i], self.epsilon
            )));
        }
        Ok(())
    }

    fn checksum(&self) -> String {
        let mut f = Fingerprinter::new();
        f.str("perturbation-set");
        for d in self.shape {
            f.u64(d as u64);
        }
        f.u64(self.epsilon.to_bits() as u64)
            .str(&self.dataset_fingerprint)
            .str(&self.config_fingerprint)
            .u64(self.seed)
            .f32s(&self.deltas);
        f.finish()
    }

    /// `<base>.f32` raw payload and `<base>.json` metadata.
    pub fn sidecar_paths(base: &Path) -> (PathBuf, PathBuf) {
        let name = base.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        (base.with_file_name(format!("{name}.f32")), base.with_file_name(format!("{name}.json")))
    }

    pub fn save(&self, base: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
        self.validate()?;
        let (payload, json) = Self::sidecar_paths(base.as_ref());
        let meta = Sidecar {
            shape: self.shape,
            epsilon: self.epsilon,
            dataset_fingerprint: self.dataset_fingerprint.clone(),
            config_fingerprint: self.config_fingerprint.clone(),
            seed: self.seed,
            checksum: self.checksum(),
        };
        fs::write(&payload, f32s_to_le(&self.deltas)).at(&payload)?;
        fs::write(&json, serde_json::to_vec_pretty(&meta)?).at(&json)?;
        Ok((payload, json))
    }

    pub fn load(base: impl AsRef<Path>) -> Result<Self> {
        let (payload, json) = Self::sidecar_paths(base.as_ref());
        let meta: Sidecar = serde_json::from_slice(&fs::read(&json).at(&json)?).map_err(|e| Error::Metadata {
            path: json.clone(),
            reason: e.to_string(),
        })?;
        let bytes = fs::read(&payload).at(&payload)?;
        let expected = meta.shape.iter().product::<usize>() as u64 * 4;
        if bytes.len() as u64 != expected {
            return Err(Error::PayloadLength {
                path: payload,
                expected,
                actual: bytes.len() as u64,
            });
        }
        let set = PerturbationSet {
            deltas: le_to_f32s(&bytes),
            shape: meta.shape,
            epsilon: meta.epsilon,
            dataset_fingerprint: meta.dataset_fingerprint,
            config_fingerprint: meta.config_fingerprint,
            seed: meta.seed,
        };
        set.validate().map_err(|e| Error::Metadata {
            path: json.clone(),
            reason: e.to_string(),
        })?;
        if set.checksum() != meta.checksum {
            return Err(Error::Metadata {
                path: json,
                reason: "checksum does not match metadata and payload".into(),
            });
        }
        Ok(set)
    }
}

/// `clamp(x + delta, 0, 1)` per pixel, with the per-pixel change never above epsilon.
pub fn apply_perturbations(dataset: &ImageDataset, set: &PerturbationSet) -> Result<ImageDataset> {
    let fp = dataset.fingerprint();
    if fp != set.dataset_fingerprint {
        return Err(Error::FingerprintMismatch {
            what: "perturbation source dataset".into(),
            expected: set.dataset_fingerprint.clone(),
            actual: fp,
        });
    }
    let [c, h, w] = dataset.shape();
    if set.shape != [dataset.len(), c, h, w] {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", [dataset.len(), c, h, w]),
            actual: format!("{:?}", set.shape),
        });
    }
    let eps = set.epsilon;
    let images = dataset
        .images()
        .iter()
        .zip(&set.deltas)
        .map(|(&x, &d)| perturb_pixel(x, d, eps))
        .collect();
    dataset.with_images(images)
}

/// Rounding of `x + d` can overshoot the bound by an ulp; step back toward `x`.
pub(crate) fn perturb_pixel(x: f32, d: f32, eps: f32) -> f32 {
    let mut y = (x + d).clamp(0.0, 1.0);
    while (y - x).abs() > eps {
        y = if y > x { y.next_down() } else { y.next_up() };
    }
    y
}
