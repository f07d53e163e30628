use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{row_loss, LossKind, Model, ModelCheckpoint};
use crate::objectives::{
    alignment_loss, alignment_loss_detached, alignment_loss_detached_gradient, alignment_loss_gradient,
    tensorclog_loss, tensorclog_loss_gradient,
};
use crate::real::Real;

/// A differentiable scalar function with an analytic gradient.
pub trait ScalarField {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// `|a - b| / max(|a|, |b|, 1e-10)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-10)
}

/// Largest coordinate-wise relative error between the analytic gradient of
/// `field` at `x` and central differences with step `h`.
pub fn finite_diff_check(field: &dyn ScalarField, x: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let analytic = field.gradient(x)?;
    if analytic.len() != x.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradient entries", x.len()),
            actual: analytic.len().to_string(),
        });
    }
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("analytic gradient".into()));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = field.value(&probe)?;
        probe[i] = x[i] - h;
        let down = field.value(&probe)?;
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("field value near coordinate {i}")));
        }
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Arithmetic used when evaluating a model for a gradient check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Scalar of the batch pixels checked by [`check_input_gradient`].
#[derive(Debug, Clone, PartialEq)]
pub enum CheckObjective {
    /// Summed per-sample loss.
    Loss(LossKind),
    /// `1 - cos(T, G)` with `G` the summed cross-entropy gradient.
    Alignment { target: Vec<f64> },
    /// Alignment with the `|G|` denominator frozen.
    Detached { target: Vec<f64>, frozen_norm: f64 },
    /// `|G|`.
    Tensorclog,
}

/// A model's pixel objective as a [`ScalarField`] over the flattened batch.
pub struct InputField<F: Real> {
    pub model: Model<F>,
    pub labels: Vec<usize>,
    pub objective: CheckObjective,
}

impl<F: Real> InputField<F> {
    fn cast(x: &[f64]) -> Vec<F> {
        x.iter().map(|v| F::of(*v)).collect()
    }

    fn functional(&self, g: &[f64]) -> Result<(f64, Vec<f64>)> {
        match &self.objective {
            CheckObjective::Loss(_) => unreachable!("loss objectives bypass the gradient functional"),
            CheckObjective::Alignment { target } => {
                let (a, d) = alignment_loss_gradient(target, g)?;
                Ok((a.value, d))
            }
            CheckObjective::Detached { target, frozen_norm } => Ok((
                alignment_loss_detached(target, g, *frozen_norm)?,
                alignment_loss_detached_gradient(target, *frozen_norm)?,
            )),
            CheckObjective::Tensorclog => Ok((tensorclog_loss(g), tensorclog_loss_gradient(g))),
        }
    }
}

impl<F: Real> ScalarField for InputField<F> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        let images = Self::cast(x);
        match &self.objective {
            CheckObjective::Loss(kind) => {
                let k = self.model.spec().classes;
                let z: Vec<f64> = self.model.logits(&images)?.iter().map(|v| v.f64()).collect();
                Ok(z.chunks(k).zip(&self.labels).map(|(row, &y)| row_loss(row, y, *kind)).sum())
            }
            CheckObjective::Alignment { target } => {
                let g = self.crafting_gradient(&images)?;
                Ok(alignment_loss(target, &g)?.value)
            }
            _ => {
                let g = self.crafting_gradient(&images)?;
                Ok(self.functional(&g)?.0)
            }
        }
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let images = Self::cast(x);
        let dx = match &self.objective {
            CheckObjective::Loss(kind) => self.model.loss_input_gradient(&images, &self.labels, *kind)?.1,
            _ => {
                let f = |g: &[f64]| self.functional(g);
                self.model.input_gradient(&images, &self.labels, LossKind::CrossEntropy, &f)?.1
            }
        };
        Ok(dx.iter().map(|v| v.f64()).collect())
    }
}

impl<F: Real> InputField<F> {
    fn crafting_gradient(&self, images: &[F]) -> Result<Vec<f64>> {
        let (_, g) = self.model.param_gradient(images, &self.labels, LossKind::CrossEntropy)?;
        Ok(g.values.iter().map(|v| v.f64()).collect())
    }
}

/// Max relative error of the analytic pixel gradient of `objective` on a batch.
pub fn check_input_gradient(
    checkpoint: &ModelCheckpoint,
    images: &[f64],
    labels: &[usize],
    objective: CheckObjective,
    h: f64,
    precision: Precision,
) -> Result<f64> {
    fn run<F: Real>(m: Model<F>, images: &[f64], labels: &[usize], objective: CheckObjective, h: f64) -> Result<f64> {
        let field = InputField {
            model: m,
            labels: labels.to_vec(),
            objective,
        };
        finite_diff_check(&field, images, h)
    }
    match precision {
        Precision::F32 => run(Model::<f32>::from_checkpoint(checkpoint)?, images, labels, objective, h),
        Precision::F64 => run(Model::<f64>::from_checkpoint(checkpoint)?, images, labels, objective, h),
    }
}
