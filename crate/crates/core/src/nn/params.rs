use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{self, Real};

/// One named parameter tensor inside the flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    /// Fan-in used for initialization.
    pub fan_in: usize,
    /// Init variance gain (`std = sqrt(gain / fan_in)`); zero for biases.
    pub gain: f64,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-layer offsets of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub slots: Vec<ParamSlot>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.slots.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A flat vector over all trainable parameters with its layout.
///
/// Holds parameters themselves, target gradients and crafting gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector<F = f32> {
    pub values: Vec<F>,
    pub layout: Layout,
}

impl<F: Real> ParamVector<F> {
    pub fn new(values: Vec<F>, layout: Layout) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", layout.len()),
                actual: format!("{}", values.len()),
            });
        }
        Ok(ParamVector { values, layout })
    }

    pub fn zeros(layout: Layout) -> Self {
        ParamVector {
            values: vec![F::zero(); layout.len()],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        real::norm(&self.values)
    }

    pub fn dot(&self, other: &Self) -> f64 {
        real::dot(&self.values, &other.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        let s = F::of(s);
        ParamVector {
            values: self.values.iter().map(|v| *v * s).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
    }

    /// Split into one owned tensor per slot.
    pub fn unflatten(&self) -> Vec<(String, Vec<usize>, Vec<F>)> {
        self.layout
            .slots
            .iter()
            .map(|s| {
                (
                    s.name.clone(),
                    s.shape.clone(),
                    self.values[s.offset..s.offset + s.len()].to_vec(),
                )
            })
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(layout: Layout, tensors: &[(String, Vec<usize>, Vec<F>)]) -> Result<Self> {
        if tensors.len() != layout.slots.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} tensors", layout.slots.len()),
                actual: format!("{}", tensors.len()),
            });
        }
        let mut values = vec![F::zero(); layout.len()];
        for (slot, (name, shape, data)) in layout.slots.iter().zip(tensors) {
            if &slot.name != name || &slot.shape != shape || data.len() != slot.len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} {:?}", slot.name, slot.shape),
                    actual: format!("{name} {shape:?} ({} values)", data.len()),
                });
            }
            values[slot.offset..slot.offset + slot.len()].copy_from_slice(data);
        }
        Ok(ParamVector { values, layout })
    }

    pub fn cast<G: Real>(&self) -> ParamVector<G> {
        ParamVector {
            values: self.values.iter().map(|v| G::of(v.f64())).collect(),
            layout: self.layout.clone(),
        }
    }
}
