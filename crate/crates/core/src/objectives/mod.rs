//! Scalar objectives: per-sample losses, alignment objectives over parameter
//! gradients, the gradient-norm baseline and perceptual regularizers.
//!
//! Objectives over gradients return the value together with its derivative with
//! respect to the crafting gradient `G`; the nn module turns that derivative into
//! a pixel gradient.

mod regularizer;

pub use regularizer::{regularizer, regularizer_gradient, ssim, tv, Regularizer, SSIM_C1, SSIM_C2};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{row_loss, LossKind};
use crate::real::{dot, norm, Real};

/// `-log p_y` with `p_y` floored at `1e-12`.
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    assert!(y < logits.len(), "label {y} outside [0, {})", logits.len());
    row_loss(logits, y, LossKind::CrossEntropy)
}

/// `-log(1 - p_y)` with `1 - p_y` floored at `1e-12`.
pub fn reverse_cross_entropy(logits: &[f64], y: usize) -> f64 {
    assert!(y < logits.len(), "label {y} outside [0, {})", logits.len());
    row_loss(logits, y, LossKind::ReverseCrossEntropy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    /// `1 - cos(T, G)`.
    pub value: f64,
    pub dot: f64,
    pub target_norm: f64,
    pub grad_norm: f64,
}

impl Alignment {
    pub fn cosine(&self) -> f64 {
        1.0 - self.value
    }
}

fn checked_norm<F: Real>(v: &[F], what: &str) -> Result<f64> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite(what.into()));
    }
    if n == 0.0 {
        return Err(Error::DegenerateGradient(format!("{what} has zero norm")));
    }
    Ok(n)
}

/// `1 - <T,G> / (|T| |G|)`, in `[0, 2]`.
pub fn alignment_loss<F: Real>(target: &[F], grad: &[F]) -> Result<Alignment> {
    if target.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradient entries", target.len()),
            actual: grad.len().to_string(),
        });
    }
    let tn = checked_norm(target, "target gradient")?;
    let gn = checked_norm(grad, "crafting gradient")?;
    let d = dot(target, grad);
    let cos = (d / (tn * gn)).clamp(-1.0, 1.0);
    Ok(Alignment {
        value: 1.0 - cos,
        dot: d,
        target_norm: tn,
        grad_norm: gn,
    })
}

/// `dA/dG = -(T / (|T||G|) - <T,G> G / (|T| |G|^3))`.
pub fn alignment_loss_gradient<F: Real>(target: &[F], grad: &[F]) -> Result<(Alignment, Vec<f64>)> {
    let a = alignment_loss(target, grad)?;
    let s = 1.0 / (a.target_norm * a.grad_norm);
    let r = a.dot / (a.target_norm * a.grad_norm.powi(3));
    let g = target.iter().zip(grad).map(|(t, g)| -(t.f64() * s - r * g.f64())).collect();
    Ok((a, g))
}

/// Alignment loss with the `|G|` denominator replaced by the constant `frozen_norm`.
pub fn alignment_loss_detached<F: Real>(target: &[F], grad: &[F], frozen_norm: f64) -> Result<f64> {
    if !(frozen_norm > 0.0 && frozen_norm.is_finite()) {
        return Err(Error::DegenerateGradient(format!("frozen norm {frozen_norm}")));
    }
    if target.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradient entries", target.len()),
            actual: grad.len().to_string(),
        });
    }
    let tn = checked_norm(target, "target gradient")?;
    Ok(1.0 - dot(target, grad) / (tn * frozen_norm))
}

/// `dA/dG` of the detached loss: `-T / (|T| c)`.
pub fn alignment_loss_detached_gradient<F: Real>(target: &[F], frozen_norm: f64) -> Result<Vec<f64>> {
    if !(frozen_norm > 0.0 && frozen_norm.is_finite()) {
        return Err(Error::DegenerateGradient(format!("frozen norm {frozen_norm}")));
    }
    let s = 1.0 / (checked_norm(target, "target gradient")? * frozen_norm);
    Ok(target.iter().map(|t| -t.f64() * s).collect())
}

/// `|G|`; minimizing it makes training gradients vanish.
pub fn tensorclog_loss<F: Real>(grad: &[F]) -> f64 {
    norm(grad)
}

/// `G / |G|`, or zero at `G = 0`.
pub fn tensorclog_loss_gradient<F: Real>(grad: &[F]) -> Vec<f64> {
    let n = norm(grad);
    if n == 0.0 {
        return vec![0.0; grad.len()];
    }
    grad.iter().map(|g| g.f64() / n).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    AlignJoint,
    AlignDetached,
    Tensorclog,
    RandomNoise,
}

impl ObjectiveKind {
    pub fn id(self) -> &'static str {
        match self {
            ObjectiveKind::AlignJoint => "align-joint",
            ObjectiveKind::AlignDetached => "align-detached",
            ObjectiveKind::Tensorclog => "tensorclog",
            ObjectiveKind::RandomNoise => "random-noise",
        }
    }
}

impl std::fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.id())
    }
}

/// Base objective plus an optional weighted regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub kind: ObjectiveKind,
    #[serde(default = "default_regularizer")]
    pub regularizer: Regularizer,
    #[serde(default)]
    pub reg_weight: f64,
}

fn default_regularizer() -> Regularizer {
    Regularizer::None
}

impl Objective {
    pub fn new(kind: ObjectiveKind) -> Self {
        Objective {
            kind,
            regularizer: Regularizer::None,
            reg_weight: 0.0,
        }
    }

    pub fn with_regularizer(mut self, regularizer: Regularizer, weight: f64) -> Self {
        self.regularizer = regularizer;
        self.reg_weight = weight;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "regularizer weight must be finite and non-negative, got {}",
                self.reg_weight
            )));
        }
        if self.kind == ObjectiveKind::RandomNoise && self.regularizer != Regularizer::None {
            return Err(Error::InvalidArgument("random-noise admits no regularizer".into()));
        }
        Ok(())
    }

    /// Whether the regularizer contributes anything.
    pub fn regularized(&self) -> bool {
        self.regularizer != Regularizer::None && self.reg_weight > 0.0
    }
}

#[cfg(test)]
mod tests;
