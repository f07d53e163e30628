use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::ModelCheckpoint;
use crate::nn::layers::{Act, Cache, Layer, ParamSink, PassMode, PerSampleStats};
use crate::nn::params::{Layout, ParamVector};
use crate::nn::spec::ModelSpec;
use crate::real::Real;

/// `-ln(1e-12)`: the loss ceiling implied by the probability floor.
pub const LOG_FLOOR: f64 = 27.631_021_115_928_547;
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-sample training objective used for parameter gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    CrossEntropy,
    ReverseCrossEntropy,
}

/// A scalar function of a summed parameter gradient `G`, returning its value
/// and `dPhi/dG`.
pub trait GradientFunctional {
    fn evaluate(&self, grad: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<T: Fn(&[f64]) -> Result<(f64, Vec<f64>)>> GradientFunctional for T {
    fn evaluate(&self, grad: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(grad)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleGradStats {
    pub losses: Vec<f64>,
    pub sq_norms: Vec<f64>,
    pub dots: Vec<f64>,
}

/// A differentiable classifier with its parameters.
#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    spec: ModelSpec,
    layers: Vec<Layer>,
    layout: Layout,
    params: Vec<F>,
}

impl<F: Real> Model<F> {
    /// Deterministic He-style initialization from `spec.seed`.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        let (layers, layout) = spec.build()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut params = vec![F::zero(); layout.len()];
        for slot in &layout.slots {
            if slot.gain == 0.0 {
                continue;
            }
            let std = (slot.gain / slot.fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for v in &mut params[slot.offset..slot.offset + slot.len()] {
                // Draw at 32-bit so f32 and f64 models agree on initialization.
                *v = F::of(normal.sample(&mut rng) as f32 as f64);
            }
        }
        Ok(Model {
            spec: spec.clone(),
            layers,
            layout,
            params,
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        let mut model = Self::init(&ckpt.spec)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters for {}", model.params.len(), ckpt.spec.arch),
                actual: format!("{}", ckpt.params.len()),
            });
        }
        model.params = ckpt.params.iter().map(|v| F::of(*v as f64)).collect();
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn param_vector(&self) -> ParamVector<F> {
        ParamVector {
            values: self.params.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn set_params(&mut self, params: &ParamVector<F>) -> Result<()> {
        if params.layout != self.layout {
            return Err(Error::ShapeMismatch {
                expected: format!("layout of {}", self.spec.arch),
                actual: "foreign layout".into(),
            });
        }
        self.params.clone_from(&params.values);
        Ok(())
    }

    /// Casts to another precision.
    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            spec: self.spec.clone(),
            layers: self.layers.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| G::of(v.f64())).collect(),
        }
    }

    fn batch_len(&self, images: &[F], labels: Option<&[usize]>) -> Result<usize> {
        let per = self.spec.input_len();
        if images.is_empty() || images.len() % per != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("a multiple of {per} values ({:?} per sample)", self.spec.input),
                actual: format!("{}", images.len()),
            });
        }
        let b = images.len() / per;
        if let Some(labels) = labels {
            if labels.len() != b {
                return Err(Error::ShapeMismatch {
                    expected: format!("{b} labels"),
                    actual: format!("{}", labels.len()),
                });
            }
            if let Some(bad) = labels.iter().find(|&&y| y >= self.spec.classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {bad} outside [0, {})",
                    self.spec.classes
                )));
            }
        }
        Ok(b)
    }

    fn input_act(&self, images: &[F], b: usize) -> Act<F> {
        let [c, h, w] = self.spec.input;
        Act::from_bchw(images, b, c, h, w)
    }

    fn run_forward(
        &self,
        mode: PassMode<'_, F>,
        x: Act<F>,
        caches: &mut Vec<Cache<F>>,
    ) -> (Act<F>, Option<Act<F>>) {
        let (mut a, mut at) = (x, None);
        for layer in &self.layers {
            (a, at) = layer.forward(&self.params, mode, a, at, caches);
        }
        (a, at)
    }

    fn run_backward(
        &self,
        mode: PassMode<'_, F>,
        caches: Vec<Cache<F>>,
        dz: Act<F>,
        dzt: Option<Act<F>>,
        sink: &mut ParamSink<'_, F>,
        need_input: bool,
    ) -> (Option<Act<F>>, Option<Act<F>>) {
        let (mut d, mut dt) = (Some(dz), dzt);
        let n = self.layers.len();
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let need = need_input || i > 0;
            let dy = d.expect("upstream gradient");
            let (nd, ndt) = layer.backward(&self.params, mode, cache, dy, dt, sink, need);
            d = nd;
            dt = ndt;
            if d.is_none() {
                debug_assert!(i == 0 || n == 0);
                break;
            }
        }
        (d, dt)
    }

    /// Logits as a row-major `B x K` buffer.
    pub fn logits(&self, images: &[F]) -> Result<Vec<F>> {
        let b = self.batch_len(images, None)?;
        let mode = PassMode {
            param_grad: false,
            tangent: None,
        };
        let mut caches = Vec::new();
        let (z, _) = self.run_forward(mode, self.input_act(images, b), &mut caches);
        let k = self.spec.classes;
        let mut out = vec![F::zero(); b * k];
        for ki in 0..k {
            for bi in 0..b {
                out[bi * k + ki] = z.data[ki * b + bi];
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(out)
    }

    /// Summed loss over the batch, accumulating `grad_theta sum_i loss_i` into `grad`.
    pub fn accumulate_param_gradient(
        &self,
        images: &[F],
        labels: &[usize],
        kind: LossKind,
        grad: &mut [F],
    ) -> Result<f64> {
        let b = self.batch_len(images, Some(labels))?;
        assert_eq!(grad.len(), self.params.len(), "gradient buffer length");
        let mode = PassMode {
            param_grad: true,
            tangent: None,
        };
        let mut caches = Vec::with_capacity(self.layers.len());
        let (z, _) = self.run_forward(mode, self.input_act(images, b), &mut caches);
        let head = loss_head(&z, None, labels, kind);
        let total: f64 = head.losses.iter().sum();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("{kind:?} loss")));
        }
        self.run_backward(mode, caches, head.dz, None, &mut ParamSink::Sum(grad), false);
        Ok(total)
    }

    /// `grad_theta sum_i loss(F(x_i; theta), y_i)` with the summed loss.
    pub fn param_gradient(
        &self,
        images: &[F],
        labels: &[usize],
        kind: LossKind,
    ) -> Result<(f64, ParamVector<F>)> {
        let mut g = vec![F::zero(); self.params.len()];
        let loss = self.accumulate_param_gradient(images, labels, kind, &mut g)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter gradient".into()));
        }
        Ok((
            loss,
            ParamVector {
                values: g,
                layout: self.layout.clone(),
            },
        ))
    }

    /// Per-sample losses and `grad_x loss_i` in `B x C x H x W` order.
    pub fn loss_input_gradient(
        &self,
        images: &[F],
        labels: &[usize],
        kind: LossKind,
    ) -> Result<(Vec<f64>, Vec<F>)> {
        let b = self.batch_len(images, Some(labels))?;
        let mode = PassMode {
            param_grad: false,
            tangent: None,
        };
        let mut caches = Vec::with_capacity(self.layers.len());
        let (z, _) = self.run_forward(mode, self.input_act(images, b), &mut caches);
        let head = loss_head(&z, None, labels, kind);
        let (dx, _) = self.run_backward(mode, caches, head.dz, None, &mut ParamSink::Discard, true);
        Ok((head.losses, dx.expect("input gradient").to_bchw()))
    }

    /// Per-sample losses, `||grad_theta loss_i||^2` and `<target, grad_theta loss_i>`
    /// without materializing the per-sample gradients.
    pub fn per_sample_gradient_stats(
        &self,
        images: &[F],
        labels: &[usize],
        kind: LossKind,
        target: &[F],
    ) -> Result<PerSampleGradStats> {
        let b = self.batch_len(images, Some(labels))?;
        if target.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} target entries", self.params.len()),
                actual: format!("{}", target.len()),
            });
        }
        let mode = PassMode {
            param_grad: true,
            tangent: None,
        };
        let mut caches = Vec::with_capacity(self.layers.len());
        let (z, _) = self.run_forward(mode, self.input_act(images, b), &mut caches);
        let head = loss_head(&z, None, labels, kind);
        let mut sink = ParamSink::PerSample(PerSampleStats {
            target,
            sq_norms: vec![0.0; b],
            dots: vec![0.0; b],
        });
        self.run_backward(mode, caches, head.dz, None, &mut sink, false);
        let ParamSink::PerSample(stats) = sink else { unreachable!() };
        if head.losses.iter().chain(&stats.sq_norms).chain(&stats.dots).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("per-sample gradient statistics".into()));
        }
        Ok(PerSampleGradStats {
            losses: head.losses,
            sq_norms: stats.sq_norms,
            dots: stats.dots,
        })
    }

    /// `grad_x <u, grad_theta loss(x_i)>` for every sample, `B x C x H x W`.
    ///
    /// Forward-mode differentiation along `theta + t u` of the reverse-mode
    /// input gradient; mixed partials commute, so this is the input gradient of
    /// the inner product between `u` and each per-sample parameter gradient.
    pub fn mixed_input_gradient(
        &self,
        images: &[F],
        labels: &[usize],
        kind: LossKind,
        direction: &[F],
    ) -> Result<Vec<F>> {
        let b = self.batch_len(images, Some(labels))?;
        if direction.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} direction entries", self.params.len()),
                actual: format!("{}", direction.len()),
            });
        }
        let mode = PassMode {
            param_grad: false,
            tangent: Some(direction),
        };
        let mut caches = Vec::with_capacity(self.layers.len());
        let (z, zt) = self.run_forward(mode, self.input_act(images, b), &mut caches);
        let head = loss_head(&z, zt.as_ref(), labels, kind);
        let (_, dxt) = self.run_backward(mode, caches, head.dz, head.dzt, &mut ParamSink::Discard, true);
        let [c, h, w] = self.spec.input;
        let out = dxt.unwrap_or_else(|| Act::zeros(c, b, h, w)).to_bchw();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixed input gradient".into()));
        }
        Ok(out)
    }

    /// Gradient w.r.t. the batch pixels of `Phi(grad_theta sum_i loss_i)`.
    pub fn input_gradient(
        &self,
        images: &[F],
        labels: &[usize],
        kind: LossKind,
        functional: &dyn GradientFunctional,
    ) -> Result<(f64, Vec<F>)> {
        let (_, g) = self.param_gradient(images, labels, kind)?;
        let g64: Vec<f64> = g.values.iter().map(|v| v.f64()).collect();
        let (value, dphi) = functional.evaluate(&g64)?;
        if !value.is_finite() || dphi.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gradient functional".into()));
        }
        let u: Vec<F> = dphi.iter().map(|v| F::of(*v)).collect();
        let dx = self.mixed_input_gradient(images, labels, kind, &u)?;
        Ok((value, dx))
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            spec: self.spec.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|v| v.f64() as f32).collect(),
            history: Default::default(),
        }
    }
}

/// Softmax probabilities of each row of a `B x K` logit buffer.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Loss value of one logit row, with the probability floor applied.
pub fn row_loss(z: &[f64], y: usize, kind: LossKind) -> f64 {
    let lse = log_sum_exp(z.iter().copied());
    let raw = match kind {
        LossKind::CrossEntropy => lse - z[y],
        LossKind::ReverseCrossEntropy => {
            let rest = log_sum_exp(z.iter().enumerate().filter(|(k, _)| *k != y).map(|(_, v)| *v));
            lse - rest
        }
    };
    raw.min(LOG_FLOOR)
}

struct Head<F> {
    losses: Vec<f64>,
    dz: Act<F>,
    dzt: Option<Act<F>>,
}

/// Loss, `dloss/dz` and its tangent for logits stored `K x B`.
fn loss_head<F: Real>(z: &Act<F>, zt: Option<&Act<F>>, labels: &[usize], kind: LossKind) -> Head<F> {
    let (k, b) = (z.c, z.b);
    let mut losses = Vec::with_capacity(b);
    let mut dz = Act::zeros(k, b, 1, 1);
    let mut dzt = zt.map(|_| Act::zeros(k, b, 1, 1));
    let mut row = vec![0.0; k];
    let mut rowt = vec![0.0; k];
    for bi in 0..b {
        for ki in 0..k {
            row[ki] = z.data[ki * b + bi].f64();
            if let Some(zt) = zt {
                rowt[ki] = zt.data[ki * b + bi].f64();
            }
        }
        let y = labels[bi];
        let loss = row_loss(&row, y, kind);
        losses.push(loss);
        if loss >= LOG_FLOOR {
            // Clamped by the probability floor: locally constant.
            continue;
        }
        let p = softmax_rows(&row, k);
        let pdot: f64 = p.iter().zip(&rowt).map(|(a, b)| a * b).sum();
        // Tangent of the softmax: p * (zt - <p, zt>).
        let pt: Vec<f64> = p.iter().zip(&rowt).map(|(pk, tk)| pk * (tk - pdot)).collect();
        match kind {
            LossKind::CrossEntropy => {
                for ki in 0..k {
                    let onehot = if ki == y { 1.0 } else { 0.0 };
                    dz.data[ki * b + bi] = F::of(p[ki] - onehot);
                    if let Some(dzt) = dzt.as_mut() {
                        dzt.data[ki * b + bi] = F::of(pt[ki]);
                    }
                }
            }
            LossKind::ReverseCrossEntropy => {
                // loss = -log(1 - p_y); dloss/dz = c (e_y - p), c = p_y / (1 - p_y).
                let rest = log_sum_exp(row.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| *v));
                let c = (row[y] - rest).exp();
                // Tangent of c: c (zt_y - <q, zt>) with q the softmax over classes != y.
                let qdot: f64 = row
                    .iter()
                    .zip(&rowt)
                    .enumerate()
                    .filter(|(j, _)| *j != y)
                    .map(|(_, (v, t))| (v - rest).exp() * t)
                    .sum();
                let ct = c * (rowt[y] - qdot);
                for ki in 0..k {
                    let onehot = if ki == y { 1.0 } else { 0.0 };
                    dz.data[ki * b + bi] = F::of(c * (onehot - p[ki]));
                    if let Some(dzt) = dzt.as_mut() {
                        dzt.data[ki * b + bi] = F::of(ct * (onehot - p[ki]) - c * pt[ki]);
                    }
                }
            }
        }
    }
    Head { losses, dz, dzt }
}
