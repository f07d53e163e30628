use serde::{Deserialize, Serialize};

use crate::data::{subset_split, ImageDataset};
use crate::error::{Error, Result};
use crate::hash::Fingerprinter;
use crate::nn::{LossKind, Model, ParamVector};

/// Which clean samples define the target gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSource {
    Full,
    Subset {
        fraction: f64,
        /// Defaults to a seed derived from the crafting seed.
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl TargetSource {
    pub fn validate(&self) -> Result<()> {
        if let TargetSource::Subset { fraction, .. } = self {
            if !(*fraction > 0.0 && *fraction <= 1.0) {
                return Err(Error::InvalidArgument(format!("target subset fraction {fraction} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// `grad_theta sum RCE` over the source samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGradient {
    pub gradient: ParamVector<f32>,
    pub samples: usize,
    /// Hash of the source samples and the model parameters.
    pub fingerprint: String,
}

impl TargetGradient {
    pub fn norm(&self) -> f64 {
        self.gradient.norm()
    }
}

pub(crate) fn summed_gradient(
    model: &Model<f32>,
    images: &[f32],
    labels: &[usize],
    per: usize,
    batch: usize,
    kind: LossKind,
) -> Result<(f64, Vec<f32>)> {
    let mut g = vec![0.0f32; model.num_params()];
    let mut loss = 0.0;
    let batch = batch.max(1);
    for (imgs, ys) in images.chunks(batch * per).zip(labels.chunks(batch)) {
        loss += model.accumulate_param_gradient(imgs, ys, kind, &mut g)?;
    }
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("parameter gradient entry {i}")));
    }
    Ok((loss, g))
}

/// Target gradient over the full dataset or a seeded subset of it.
pub fn compute_target_gradient(
    model: &Model<f32>,
    dataset: &ImageDataset,
    source: &TargetSource,
    default_seed: u64,
    batch: usize,
) -> Result<TargetGradient> {
    source.validate()?;
    let owned;
    let src = match source {
        TargetSource::Full => dataset,
        TargetSource::Subset { fraction, seed } => {
            owned = subset_split(dataset, *fraction, seed.unwrap_or(default_seed))?;
            &owned
        }
    };
    let (_, g) = summed_gradient(
        model,
        src.images(),
        src.labels(),
        src.sample_len(),
        batch,
        LossKind::ReverseCrossEntropy,
    )?;
    let gradient = ParamVector::new(g, model.layout().clone())?;
    if gradient.norm() == 0.0 {
        return Err(Error::DegenerateGradient(
            "target gradient is zero; the surrogate may be degenerate".into(),
        ));
    }
    let mut f = Fingerprinter::new();
    f.str("target-gradient").str(&src.fingerprint()).f32s(model.params());
    Ok(TargetGradient {
        gradient,
        samples: src.len(),
        fingerprint: f.finish(),
    })
}
