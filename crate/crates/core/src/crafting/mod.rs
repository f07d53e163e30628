//! The crafting loop: target gradient, restarts, differentiable augmentation,
//! signed Adam and projection, in joint (whole split) and online (per-sample,
//! detached denominator) modes.

mod augment;
mod optim;
mod target;

pub use augment::{diff_augment, diff_augment_adjoint, Augmentation, MAX_SHIFT};
pub use optim::{project, signed_adam_step, OptimizerState, StepSchedule, ADAM_BETA1, ADAM_BETA2, ADAM_GUARD};
pub use target::{compute_target_gradient, TargetGradient, TargetSource};

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::data::{ImageDataset, PerturbationSet};
use crate::error::{Error, Result};
use crate::hash::{derive_seed, mix_seed, Fingerprinter};
use crate::nn::{LossKind, Model, ModelCheckpoint};
use crate::objectives::{
    alignment_loss, alignment_loss_gradient, regularizer_gradient, tensorclog_loss, Objective, ObjectiveKind,
};
use crate::real::{dot, norm};
use optim::signed_adam_step_into;
use target::summed_gradient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CraftMode {
    /// One cosine over the summed crafting gradient of each split.
    Joint,
    /// Each sample aligns its own gradient with the target, denominator detached.
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CraftConfig {
    /// l-infinity bound on the `[0,1]` scale; also accepts strings like `"8/255"`.
    #[serde(default = "default_epsilon", deserialize_with = "de_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub step_size: StepSchedule,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default = "default_source")]
    pub target_source: TargetSource,
    /// Samples per split; each split refreshes the target gradient. 0 = one split.
    #[serde(default)]
    pub split_size: usize,
    #[serde(default = "default_mode")]
    pub mode: CraftMode,
    #[serde(default)]
    pub seed: u64,
}

fn default_epsilon() -> f64 {
    8.0 / 255.0
}

fn default_restarts() -> usize {
    8
}

fn default_steps() -> usize {
    240
}

fn default_batch() -> usize {
    125
}

fn default_objective() -> Objective {
    Objective::new(ObjectiveKind::AlignJoint)
}

fn default_true() -> bool {
    true
}

fn default_source() -> TargetSource {
    TargetSource::Full
}

fn default_mode() -> CraftMode {
    CraftMode::Joint
}

fn de_epsilon<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(s) => parse_fraction(&s).ok_or_else(|| serde::de::Error::custom(format!("bad epsilon `{s}`"))),
    }
}

/// Parses `"0.03"` or `"8/255"`.
pub fn parse_fraction(s: &str) -> Option<f64> {
    match s.split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
            (b != 0.0).then_some(a / b)
        }
        None => s.trim().parse().ok(),
    }
}

impl Default for CraftConfig {
    fn default() -> Self {
        CraftConfig {
            epsilon: default_epsilon(),
            restarts: default_restarts(),
            steps: default_steps(),
            step_size: StepSchedule::default(),
            batch_size: default_batch(),
            objective: default_objective(),
            augment: true,
            target_source: TargetSource::Full,
            split_size: 0,
            mode: CraftMode::Joint,
            seed: 0,
        }
    }
}

impl CraftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside [0,1]", self.epsilon)));
        }
        if self.restarts == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("restarts, steps and batch_size must be positive".into()));
        }
        self.step_size.validate()?;
        self.objective.validate()?;
        self.target_source.validate()?;
        if self.mode == CraftMode::Online && self.objective.kind != ObjectiveKind::AlignDetached {
            return Err(Error::InvalidArgument(format!(
                "online crafting optimizes the detached alignment objective, not {}",
                self.objective.kind
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let mut f = Fingerprinter::new();
        f.str("craft-config").bytes(&serde_json::to_vec(self).expect("config serializes"));
        f.finish()
    }

    pub fn epsilon_f32(&self) -> f32 {
        self.epsilon as f32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartReport {
    /// Objective (augmented, regularized) before each step.
    pub trace: Vec<f64>,
    /// Pure objective at the random initialization, without augmentation.
    pub init_loss: Option<f64>,
    /// Pure objective after the last step, without augmentation.
    pub final_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub samples: usize,
    pub target_norm: f64,
    pub target_fingerprint: String,
    /// Pure objective on the clean split.
    pub clean_loss: f64,
    pub restarts: Vec<RestartReport>,
    /// Joint mode: the restart kept for the whole split.
    pub selected: Option<usize>,
    /// Online mode: how many samples kept each restart.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub selected_counts: Vec<usize>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftReport {
    pub objective: ObjectiveKind,
    pub mode: CraftMode,
    pub epsilon: f64,
    pub splits: Vec<SplitReport>,
    /// Sample-weighted mean of the split final losses.
    pub final_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

impl CraftReport {
    pub fn selected_restart(&self) -> Option<usize> {
        self.splits.first().and_then(|s| s.selected)
    }
}

/// State after one optimization step, handed to observers.
pub struct StepEvent<'a> {
    pub split: usize,
    pub restart: usize,
    pub step: usize,
    /// Objective before this step's update.
    pub objective: f64,
    /// Split-local sample positions in the source dataset, canonical order.
    pub indices: &'a [usize],
    /// Deltas of the split after the update and projection.
    pub deltas: &'a [f32],
}

pub type Observer<'o> = dyn FnMut(&StepEvent<'_>) + 'o;

struct Seeds {
    init: u64,
    augment: u64,
    split: u64,
    target: u64,
    noise: u64,
}

impl Seeds {
    fn new(seed: u64) -> Self {
        Seeds {
            init: derive_seed(seed, &["craft", "init"]),
            augment: derive_seed(seed, &["craft", "augment"]),
            split: derive_seed(seed, &["craft", "split"]),
            target: target_seed(seed),
            noise: derive_seed(seed, &["craft", "noise"]),
        }
    }
}

/// Seed for subset target-gradient draws under crafting seed `seed`.
pub(crate) fn target_seed(seed: u64) -> u64 {
    derive_seed(seed, &["craft", "target-subset"])
}

fn sample_key(id: &str) -> u64 {
    derive_seed(0, &["sample", id])
}

/// Craft perturbations for `dataset` against the surrogate `checkpoint`.
pub fn craft(
    checkpoint: &ModelCheckpoint,
    dataset: &ImageDataset,
    config: &CraftConfig,
) -> Result<(PerturbationSet, CraftReport)> {
    craft_observed(checkpoint, dataset, config, &mut |_| {})
}

/// [`craft`] with a callback after every optimization step.
pub fn craft_observed(
    checkpoint: &ModelCheckpoint,
    dataset: &ImageDataset,
    config: &CraftConfig,
    observer: &mut Observer<'_>,
) -> Result<(PerturbationSet, CraftReport)> {
    config.validate()?;
    let model = Model::<f32>::from_checkpoint(checkpoint)?;
    check_compatible(&model, dataset)?;
    let start = Instant::now();
    let seeds = Seeds::new(config.seed);
    let eps = config.epsilon_f32();
    let mut set = PerturbationSet::zeros(dataset, eps, config.fingerprint(), config.seed);

    if config.objective.kind == ObjectiveKind::RandomNoise {
        fill_random_signs(&mut set, dataset, seeds.noise);
        let split = noise_report(&model, dataset, &set, config, &seeds)?;
        let report = CraftReport {
            objective: config.objective.kind,
            mode: config.mode,
            epsilon: config.epsilon,
            final_loss: split.final_loss,
            splits: vec![split],
            wall_time_s: Some(start.elapsed().as_secs_f64()),
        };
        return Ok((set, report));
    }

    let per = dataset.sample_len();
    let mut splits = Vec::new();
    for (si, indices) in split_indices(dataset.len(), config.split_size, seeds.split).iter().enumerate() {
        let split = dataset.select(indices)?;
        let target = compute_target_gradient(&model, &split, &config.target_source, seeds.target, config.batch_size)?;
        let (deltas, report) = match config.mode {
            CraftMode::Joint => craft_joint(&model, &split, &target, config, &seeds, si, indices, observer)?,
            CraftMode::Online => craft_online_split(&model, &split, &target, config, &seeds, si, indices, observer)?,
        };
        for (k, &i) in indices.iter().enumerate() {
            set.deltas[i * per..(i + 1) * per].copy_from_slice(&deltas[k * per..(k + 1) * per]);
        }
        splits.push(report);
    }
    let total: usize = splits.iter().map(|s| s.samples).sum();
    let final_loss = splits.iter().map(|s| s.final_loss * s.samples as f64).sum::<f64>() / total as f64;
    set.validate()?;
    let report = CraftReport {
        objective: config.objective.kind,
        mode: config.mode,
        epsilon: config.epsilon,
        splits,
        final_loss,
        wall_time_s: Some(start.elapsed().as_secs_f64()),
    };
    Ok((set, report))
}

/// Online crafting of `samples` against a precomputed target gradient.
///
/// Every sample is optimized on its own; the result for a sample does not
/// depend on which other samples are passed alongside it.
pub fn craft_online(
    checkpoint: &ModelCheckpoint,
    samples: &ImageDataset,
    target: &TargetGradient,
    config: &CraftConfig,
) -> Result<(Vec<f32>, SplitReport)> {
    let mut cfg = config.clone();
    cfg.mode = CraftMode::Online;
    cfg.validate()?;
    let model = Model::<f32>::from_checkpoint(checkpoint)?;
    check_compatible(&model, samples)?;
    if target.gradient.len() != model.num_params() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} target entries", model.num_params()),
            actual: target.gradient.len().to_string(),
        });
    }
    let indices: Vec<usize> = (0..samples.len()).collect();
    craft_online_split(&model, samples, target, &cfg, &Seeds::new(cfg.seed), 0, &indices, &mut |_| {})
}

fn check_compatible(model: &Model<f32>, dataset: &ImageDataset) -> Result<()> {
    let spec = model.spec();
    if spec.input != dataset.shape() || spec.classes != dataset.classes() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?} images with {} classes", spec.input, spec.classes),
            actual: format!("{:?} images with {} classes", dataset.shape(), dataset.classes()),
        });
    }
    Ok(())
}

fn fill_random_signs(set: &mut PerturbationSet, dataset: &ImageDataset, seed: u64) {
    let per = dataset.sample_len();
    let eps = set.epsilon;
    for (i, id) in dataset.ids().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, sample_key(id)]));
        for d in &mut set.deltas[i * per..(i + 1) * per] {
            *d = if rng.random_bool(0.5) { eps } else { -eps };
        }
    }
}

/// Alignment of the noise-perturbed data, for comparison with crafted runs.
fn noise_report(
    model: &Model<f32>,
    dataset: &ImageDataset,
    set: &PerturbationSet,
    config: &CraftConfig,
    seeds: &Seeds,
) -> Result<SplitReport> {
    let per = dataset.sample_len();
    let b = config.batch_size;
    let target = compute_target_gradient(model, dataset, &config.target_source, seeds.target, b)?;
    let t = &target.gradient.values;
    let (_, g_clean) = summed_gradient(model, dataset.images(), dataset.labels(), per, b, LossKind::CrossEntropy)?;
    let noisy = crate::data::apply_perturbations(dataset, set)?;
    let (_, g) = summed_gradient(model, noisy.images(), noisy.labels(), per, b, LossKind::CrossEntropy)?;
    Ok(SplitReport {
        samples: dataset.len(),
        target_norm: target.norm(),
        target_fingerprint: target.fingerprint,
        clean_loss: alignment_loss(t, &g_clean)?.value,
        restarts: Vec::new(),
        selected: None,
        selected_counts: Vec::new(),
        final_loss: alignment_loss(t, &g)?.value,
    })
}

/// Seeded partition into splits of `size` (0 = everything), each in canonical order.
fn split_indices(n: usize, size: usize, seed: u64) -> Vec<Vec<usize>> {
    if size == 0 || size >= n {
        return vec![(0..n).collect()];
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
        .chunks(size)
        .map(|c| {
            let mut c = c.to_vec();
            c.sort_unstable();
            c
        })
        .collect()
}

fn init_deltas(split: &ImageDataset, eps: f32, seed: u64, restart: usize) -> Vec<f32> {
    let per = split.sample_len();
    let mut deltas = vec![0.0f32; split.images().len()];
    if eps > 0.0 {
        for (i, id) in split.ids().iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, restart as u64, sample_key(id)]));
            for d in &mut deltas[i * per..(i + 1) * per] {
                *d = rng.random_range(-eps..=eps);
            }
        }
    }
    project(&mut deltas, eps, split.images());
    deltas
}

fn perturbed(split: &ImageDataset, deltas: &[f32]) -> Vec<f32> {
    split.images().iter().zip(deltas).map(|(x, d)| x + d).collect()
}

/// Inputs the network sees this step, with the draws that produced them.
fn network_inputs(
    split: &ImageDataset,
    pert: &[f32],
    config: &CraftConfig,
    seeds: &Seeds,
    keys: &[u64],
    restart: usize,
    step: usize,
) -> (Vec<f32>, Option<Vec<Augmentation>>) {
    if !config.augment {
        return (pert.to_vec(), None);
    }
    let draws: Vec<Augmentation> = keys
        .iter()
        .map(|&k| Augmentation::draw(seeds.augment, restart, step, k))
        .collect();
    (diff_augment(pert, split.shape(), &draws), Some(draws))
}

/// Base objective (no regularizer) of the summed gradient `g`, with `dPhi/dG`
/// and the scale applied to the mixed product.
fn joint_objective(kind: ObjectiveKind, target: &[f32], g: &[f32]) -> Result<(f64, Vec<f32>, f32)> {
    match kind {
        ObjectiveKind::AlignJoint => {
            let (a, u) = alignment_loss_gradient(target, g)?;
            Ok((a.value, u.iter().map(|&v| v as f32).collect(), 1.0))
        }
        ObjectiveKind::AlignDetached => {
            let a = alignment_loss(target, g)?;
            Ok((a.value, detached_direction(target, a.target_norm), (1.0 / a.grad_norm) as f32))
        }
        ObjectiveKind::Tensorclog => {
            let n = tensorclog_loss(g);
            let u = if n > 0.0 {
                g.iter().map(|&v| (v as f64 / n) as f32).collect()
            } else {
                vec![0.0; g.len()]
            };
            Ok((n, u, 1.0))
        }
        ObjectiveKind::RandomNoise => unreachable!("random noise has no crafting objective"),
    }
}

/// Pure objective used for restart selection.
fn pure_objective(kind: ObjectiveKind, target: &[f32], g: &[f32]) -> Result<f64> {
    match kind {
        ObjectiveKind::Tensorclog => Ok(tensorclog_loss(g)),
        _ => Ok(alignment_loss(target, g)?.value),
    }
}

/// `-T / |T|`; dividing the mixed product by the frozen norm completes the
/// detached objective's direction.
fn detached_direction(target: &[f32], target_norm: f64) -> Vec<f32> {
    target.iter().map(|&t| (-(t as f64) / target_norm) as f32).collect()
}

fn not_finite(value: f64, what: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

fn regularizer_terms(split: &ImageDataset, deltas: &[f32], pert: &[f32], objective: &Objective) -> Result<(f64, Vec<f64>)> {
    if !objective.regularized() {
        return Ok((0.0, Vec::new()));
    }
    regularizer_gradient(deltas, split.images(), pert, split.shape(), objective.regularizer, objective.reg_weight)
}

/// Backpropagate a mixed product through the augmentation into delta space.
fn to_delta_space(dx: Vec<f32>, draws: &Option<Vec<Augmentation>>, shape: [usize; 3]) -> Vec<f32> {
    match draws {
        Some(d) => diff_augment_adjoint(&dx, shape, d),
        None => dx,
    }
}

struct RestartOutcome {
    deltas: Vec<f32>,
    report: RestartReport,
}

#[allow(clippy::too_many_arguments)]
fn craft_joint(
    model: &Model<f32>,
    split: &ImageDataset,
    target: &TargetGradient,
    config: &CraftConfig,
    seeds: &Seeds,
    split_index: usize,
    indices: &[usize],
    observer: &mut Observer<'_>,
) -> Result<(Vec<f32>, SplitReport)> {
    let per = split.sample_len();
    let t = &target.gradient.values;
    let kind = config.objective.kind;
    let batch = config.batch_size;
    let (_, g_clean) = summed_gradient(model, split.images(), split.labels(), per, batch, LossKind::CrossEntropy)?;
    let clean_loss = pure_objective(kind, t, &g_clean)?;
    let mut base = SplitReport {
        samples: split.len(),
        target_norm: target.norm(),
        target_fingerprint: target.fingerprint.clone(),
        clean_loss,
        restarts: Vec::new(),
        selected: None,
        selected_counts: Vec::new(),
        final_loss: clean_loss,
    };
    let eps = config.epsilon_f32();
    if eps == 0.0 {
        base.selected = Some(0);
        return Ok((vec![0.0; split.images().len()], base));
    }
    let keys: Vec<u64> = split.ids().iter().map(|id| sample_key(id)).collect();
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    for r in 0..config.restarts {
        match joint_restart(model, split, t, config, seeds, &keys, r, split_index, indices, observer) {
            Ok(out) => {
                let fl = out.report.final_loss.expect("completed restart has a final loss");
                if best.as_ref().is_none_or(|(b, _, _)| fl < *b) {
                    best = Some((fl, r, out.deltas));
                }
                base.restarts.push(out.report);
            }
            Err(Error::NonFinite(what)) => base.restarts.push(RestartReport {
                trace: Vec::new(),
                init_loss: None,
                final_loss: None,
                aborted: Some(what),
            }),
            Err(e) => return Err(e),
        }
    }
    let Some((fl, r, deltas)) = best else {
        return Err(Error::AllRestartsAborted(config.restarts));
    };
    base.selected = Some(r);
    base.final_loss = fl;
    Ok((deltas, base))
}

#[allow(clippy::too_many_arguments)]
fn joint_restart(
    model: &Model<f32>,
    split: &ImageDataset,
    t: &[f32],
    config: &CraftConfig,
    seeds: &Seeds,
    keys: &[u64],
    r: usize,
    split_index: usize,
    indices: &[usize],
    observer: &mut Observer<'_>,
) -> Result<RestartOutcome> {
    let per = split.sample_len();
    let shape = split.shape();
    let labels = split.labels();
    let batch = config.batch_size;
    let kind = config.objective.kind;
    let eps = config.epsilon_f32();
    let mut deltas = init_deltas(split, eps, seeds.init, r);
    let (_, g0) = summed_gradient(model, &perturbed(split, &deltas), labels, per, batch, LossKind::CrossEntropy)?;
    let init_loss = pure_objective(kind, t, &g0)?;
    let mut state = OptimizerState::new(deltas.len());
    let mut update = vec![0.0f32; deltas.len()];
    let mut trace = Vec::with_capacity(config.steps);
    for j in 0..config.steps {
        let pert = perturbed(split, &deltas);
        let (inputs, draws) = network_inputs(split, &pert, config, seeds, keys, r, j);
        let (_, g) = summed_gradient(model, &inputs, labels, per, batch, LossKind::CrossEntropy)?;
        let (value, u, scale) = joint_objective(kind, t, &g)?;
        let (reg_value, reg_grad) = regularizer_terms(split, &deltas, &pert, &config.objective)?;
        let total = value + reg_value;
        not_finite(total, "crafting objective")?;
        trace.push(total);
        let mut grad = Vec::with_capacity(deltas.len());
        for (imgs, ys) in inputs.chunks(batch * per).zip(labels.chunks(batch)) {
            grad.extend(model.mixed_input_gradient(imgs, ys, LossKind::CrossEntropy, &u)?);
        }
        let mut grad = to_delta_space(grad, &draws, shape);
        if scale != 1.0 {
            grad.iter_mut().for_each(|v| *v *= scale);
        }
        for (gv, rg) in grad.iter_mut().zip(&reg_grad) {
            *gv += *rg as f32;
        }
        let step = config.step_size.at(config.epsilon, j, config.steps) as f32;
        signed_adam_step_into(&mut state, &grad, step, &mut update)?;
        for (d, u) in deltas.iter_mut().zip(&update) {
            *d += u;
        }
        project(&mut deltas, eps, split.images());
        observer(&StepEvent {
            split: split_index,
            restart: r,
            step: j,
            objective: total,
            indices,
            deltas: &deltas,
        });
    }
    let (_, g) = summed_gradient(model, &perturbed(split, &deltas), labels, per, batch, LossKind::CrossEntropy)?;
    let final_loss = pure_objective(kind, t, &g)?;
    not_finite(final_loss, "final crafting objective")?;
    Ok(RestartOutcome {
        deltas,
        report: RestartReport {
            trace,
            init_loss: Some(init_loss),
            final_loss: Some(final_loss),
            aborted: None,
        },
    })
}

/// Per-sample `<T, g_j>` and `|g_j|` for a chunk of inputs.
fn per_sample_alignment(
    model: &Model<f32>,
    inputs: &[f32],
    labels: &[usize],
    t: &[f32],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if labels.len() == 1 {
        // A lone sample's gradient is the summed gradient; this keeps a
        // single-sample online run identical to joint crafting of that sample.
        let (_, g) = model.param_gradient(inputs, labels, LossKind::CrossEntropy)?;
        return Ok((vec![dot(t, &g.values)], vec![norm(&g.values)]));
    }
    let stats = model.per_sample_gradient_stats(inputs, labels, LossKind::CrossEntropy, t)?;
    Ok((stats.dots, stats.sq_norms.iter().map(|v| v.sqrt()).collect()))
}

/// A sample whose gradient underflowed to zero (saturated softmax) scores as
/// orthogonal to the target.
fn per_sample_losses(dots: &[f64], norms: &[f64], target_norm: f64) -> Result<Vec<f64>> {
    Ok(dots
        .iter()
        .zip(norms)
        .map(|(d, n)| if *n == 0.0 { 1.0 } else { 1.0 - (d / (target_norm * n)).clamp(-1.0, 1.0) })
        .collect())
}

#[allow(clippy::too_many_arguments)]
fn craft_online_split(
    model: &Model<f32>,
    split: &ImageDataset,
    target: &TargetGradient,
    config: &CraftConfig,
    seeds: &Seeds,
    split_index: usize,
    indices: &[usize],
    observer: &mut Observer<'_>,
) -> Result<(Vec<f32>, SplitReport)> {
    let per = split.sample_len();
    let n = split.len();
    let t = &target.gradient.values;
    let tn = target.norm();
    let eps = config.epsilon_f32();
    let b = config.batch_size;
    let mut clean = Vec::with_capacity(n);
    for (imgs, ys) in split.images().chunks(b * per).zip(split.labels().chunks(b)) {
        let (dots, norms) = per_sample_alignment(model, imgs, ys, t)?;
        clean.extend(per_sample_losses(&dots, &norms, tn)?);
    }
    let clean_loss = clean.iter().sum::<f64>() / n as f64;
    let mut report = SplitReport {
        samples: n,
        target_norm: tn,
        target_fingerprint: target.fingerprint.clone(),
        clean_loss,
        restarts: Vec::new(),
        selected: None,
        selected_counts: vec![0; config.restarts],
        final_loss: clean_loss,
    };
    if eps == 0.0 {
        report.selected_counts[0] = n;
        return Ok((vec![0.0; split.images().len()], report));
    }
    let keys: Vec<u64> = split.ids().iter().map(|id| sample_key(id)).collect();
    let mut best_delta = vec![0.0f32; split.images().len()];
    let mut best_loss = vec![f64::INFINITY; n];
    let mut best_restart = vec![usize::MAX; n];
    for r in 0..config.restarts {
        match online_restart(model, split, t, tn, config, seeds, &keys, r, split_index, indices, observer) {
            Ok((deltas, losses, rep)) => {
                for i in 0..n {
                    if losses[i] < best_loss[i] {
                        best_loss[i] = losses[i];
                        best_restart[i] = r;
                        best_delta[i * per..(i + 1) * per].copy_from_slice(&deltas[i * per..(i + 1) * per]);
                    }
                }
                report.restarts.push(rep);
            }
            Err(Error::NonFinite(what)) => report.restarts.push(RestartReport {
                trace: Vec::new(),
                init_loss: None,
                final_loss: None,
                aborted: Some(what),
            }),
            Err(e) => return Err(e),
        }
    }
    if best_restart.contains(&usize::MAX) {
        return Err(Error::AllRestartsAborted(config.restarts));
    }
    for &r in &best_restart {
        report.selected_counts[r] += 1;
    }
    report.final_loss = best_loss.iter().sum::<f64>() / n as f64;
    Ok((best_delta, report))
}

#[allow(clippy::too_many_arguments)]
fn online_restart(
    model: &Model<f32>,
    split: &ImageDataset,
    t: &[f32],
    tn: f64,
    config: &CraftConfig,
    seeds: &Seeds,
    keys: &[u64],
    r: usize,
    split_index: usize,
    indices: &[usize],
    observer: &mut Observer<'_>,
) -> Result<(Vec<f32>, Vec<f64>, RestartReport)> {
    let per = split.sample_len();
    let n = split.len();
    let shape = split.shape();
    let labels = split.labels();
    let b = config.batch_size;
    let eps = config.epsilon_f32();
    let u = detached_direction(t, tn);
    let mut deltas = init_deltas(split, eps, seeds.init, r);
    let losses_of = |deltas: &[f32]| -> Result<Vec<f64>> {
        let pert = perturbed(split, deltas);
        let mut out = Vec::with_capacity(n);
        for (imgs, ys) in pert.chunks(b * per).zip(labels.chunks(b)) {
            let (dots, norms) = per_sample_alignment(model, imgs, ys, t)?;
            out.extend(per_sample_losses(&dots, &norms, tn)?);
        }
        Ok(out)
    };
    let init = losses_of(&deltas)?;
    let mut state = OptimizerState::new(deltas.len());
    let mut update = vec![0.0f32; deltas.len()];
    let mut trace = Vec::with_capacity(config.steps);
    for j in 0..config.steps {
        let pert = perturbed(split, &deltas);
        let (inputs, draws) = network_inputs(split, &pert, config, seeds, keys, r, j);
        let (reg_value, reg_grad) = regularizer_terms(split, &deltas, &pert, &config.objective)?;
        let mut grad = Vec::with_capacity(deltas.len());
        let mut value = 0.0;
        for (imgs, ys) in inputs.chunks(b * per).zip(labels.chunks(b)) {
            let (dots, norms) = per_sample_alignment(model, imgs, ys, t)?;
            value += per_sample_losses(&dots, &norms, tn)?.iter().sum::<f64>();
            let mut dx = model.mixed_input_gradient(imgs, ys, LossKind::CrossEntropy, &u)?;
            for (chunk, c) in dx.chunks_mut(per).zip(&norms) {
                let scale = if *c == 0.0 { 0.0 } else { (1.0 / c) as f32 };
                chunk.iter_mut().for_each(|v| *v *= scale);
            }
            grad.extend(dx);
        }
        let total = (value + reg_value) / n as f64;
        not_finite(total, "online crafting objective")?;
        trace.push(total);
        let mut grad = to_delta_space(grad, &draws, shape);
        for (gv, rg) in grad.iter_mut().zip(&reg_grad) {
            *gv += *rg as f32;
        }
        let step = config.step_size.at(config.epsilon, j, config.steps) as f32;
        signed_adam_step_into(&mut state, &grad, step, &mut update)?;
        for (d, u) in deltas.iter_mut().zip(&update) {
            *d += u;
        }
        project(&mut deltas, eps, split.images());
        observer(&StepEvent {
            split: split_index,
            restart: r,
            step: j,
            objective: total,
            indices,
            deltas: &deltas,
        });
    }
    let fin = losses_of(&deltas)?;
    if fin.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("final online objective".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let report = RestartReport {
        trace,
        init_loss: Some(mean(&init)),
        final_loss: Some(mean(&fin)),
        aborted: None,
    };
    Ok((deltas, fin, report))
}
