//! Small differentiable classifiers.
//!
//! Besides logits and parameter gradients, [`Model`] exposes the second-order
//! product needed for crafting: the gradient with respect to input pixels of a
//! scalar function of the summed parameter gradient.

pub mod checkpoint;
pub mod layers;
pub mod model;
pub mod params;
pub mod spec;

pub use checkpoint::{ModelCheckpoint, TrainingHistory};
pub use model::{row_loss, PerSampleGradStats, softmax_rows, GradientFunctional, LossKind, Model, LOG_FLOOR, PROB_FLOOR};
pub use params::{Layout, ParamSlot, ParamVector};
pub use spec::{Architecture, ModelSpec};

use crate::error::Result;

/// Fresh deterministic checkpoint for `spec`.
pub fn init_model(spec: &ModelSpec) -> Result<ModelCheckpoint> {
    Ok(Model::<f32>::init(spec)?.to_checkpoint())
}
