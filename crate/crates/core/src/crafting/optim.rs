use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_GUARD: f32 = 1e-8;

/// Adam moments for signed updates of a perturbation buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u32,
    pub beta1: f32,
    pub beta2: f32,
    pub guard: f32,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        OptimizerState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            guard: ADAM_GUARD,
        }
    }
}

/// Update the moments with `grad` and return `-step_size * sign(m_hat / (sqrt(v_hat) + guard))`.
pub fn signed_adam_step(state: &mut OptimizerState, grad: &[f32], step_size: f32) -> Result<Vec<f32>> {
    let mut update = vec![0.0; grad.len()];
    signed_adam_step_into(state, grad, step_size, &mut update)?;
    Ok(update)
}

pub(crate) fn signed_adam_step_into(
    state: &mut OptimizerState,
    grad: &[f32],
    step_size: f32,
    update: &mut [f32],
) -> Result<()> {
    if grad.len() != state.m.len() || update.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} gradient entries", state.m.len()),
            actual: grad.len().to_string(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("objective gradient at entry {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, guard) = (state.beta1, state.beta2, state.guard);
    for (((m, v), &g), u) in state.m.iter_mut().zip(state.v.iter_mut()).zip(grad).zip(update.iter_mut()) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let dir = (*m / c1) / ((*v / c2).sqrt() + guard);
        *u = if dir > 0.0 {
            -step_size
        } else if dir < 0.0 {
            step_size
        } else {
            0.0
        };
    }
    Ok(())
}

/// Clamp into `[-eps, eps]`, then so that `clean + delta` stays in `[0,1]`.
pub fn project(delta: &mut [f32], epsilon: f32, clean: &[f32]) {
    for (d, &x) in delta.iter_mut().zip(clean) {
        *d = d.clamp(-epsilon, epsilon).clamp(-x, 1.0 - x);
    }
}

/// Initial step `initial` (default `eps / 10`), multiplied by `factor` at
/// each step index `ceil(p * M)` for `p` in `decay_at`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    #[serde(default)]
    pub initial: Option<f64>,
    #[serde(default = "default_decay_at")]
    pub decay_at: Vec<f64>,
    #[serde(default = "default_factor")]
    pub factor: f64,
}

fn default_decay_at() -> Vec<f64> {
    vec![0.58, 0.86]
}

fn default_factor() -> f64 {
    0.1
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            initial: None,
            decay_at: default_decay_at(),
            factor: default_factor(),
        }
    }
}

impl StepSchedule {
    /// Step size for zero-based step `j` of `steps`.
    pub fn at(&self, epsilon: f64, j: usize, steps: usize) -> f64 {
        let base = self.initial.unwrap_or(epsilon / 10.0);
        let drops = self
            .decay_at
            .iter()
            .filter(|&&p| j >= (p * steps as f64).ceil() as usize)
            .count();
        base * self.factor.powi(drops as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.initial {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("initial step size {s}")));
            }
        }
        if self.decay_at.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("decay points must lie in [0,1]".into()));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::InvalidArgument(format!("decay factor {}", self.factor)));
        }
        Ok(())
    }
}
