//! From-scratch training of surrogate and victim models, training-time
//! defenses, and validation accuracy.

mod defense;

pub use defense::{
    dpsgd_transform, gaussian_kernel, gaussian_smooth, random_noise_defense, DefenseConfig, DefenseKind,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crafting::Augmentation;
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::hash::{derive_seed, mix_seed, Fingerprinter};
use crate::nn::{Architecture, LossKind, Model, ModelCheckpoint, ModelSpec, TrainingHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Multiply by `gamma` at each epoch `floor(m * epochs)` for `m` in `milestones`.
    MultiStep {
        #[serde(default = "default_milestones")]
        milestones: Vec<f64>,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// Cosine annealing to zero over the run, per step.
    Cosine,
}

fn default_milestones() -> Vec<f64> {
    vec![0.5, 0.75]
}

fn default_gamma() -> f64 {
    0.1
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::MultiStep {
            milestones: default_milestones(),
            gamma: default_gamma(),
        }
    }
}

impl LrSchedule {
    /// Learning rate at `epoch` and fractional progress `t` in `[0, 1)`.
    pub fn at(&self, base: f64, epoch: usize, epochs: usize, t: f64) -> f64 {
        match self {
            LrSchedule::MultiStep { milestones, gamma } => {
                let drops = milestones
                    .iter()
                    .filter(|&&m| epoch >= (m * epochs as f64).floor() as usize)
                    .count();
                base * gamma.powi(drops as i32)
            }
            LrSchedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimConfig {
    pub arch: Architecture,
    /// Channel/hidden width; architecture default when absent.
    #[serde(default)]
    pub width: Option<usize>,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    /// Random flips and shifts of up to 4 pixels with zero fill.
    #[serde(default = "default_true")]
    pub augment: bool,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    128
}

fn default_lr() -> f64 {
    0.1
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_true() -> bool {
    true
}

impl VictimConfig {
    pub fn new(arch: Architecture, epochs: usize) -> Self {
        VictimConfig {
            arch,
            width: None,
            epochs,
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            schedule: LrSchedule::default(),
            augment: true,
            defense: DefenseConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("victim training needs at least one epoch".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument("momentum must be in [0,1) and weight decay non-negative".into()));
        }
        self.defense.validate()
    }

    /// Model spec for a dataset; the architecture need not match the surrogate's.
    pub fn spec_for(&self, dataset: &ImageDataset) -> ModelSpec {
        let spec = ModelSpec::new(
            self.arch,
            dataset.shape(),
            dataset.classes(),
            derive_seed(self.seed, &["victim", "init"]),
        );
        match self.width {
            Some(w) => spec.with_width(w),
            None => spec,
        }
    }

    pub fn fingerprint(&self) -> String {
        let mut f = Fingerprinter::new();
        f.str("victim-config").bytes(&serde_json::to_vec(self).expect("config serializes"));
        f.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent correct on the validation set.
    pub val_acc: Option<f64>,
    pub per_class_acc: Vec<f64>,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub train_fingerprint: String,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub overall: f64,
    pub per_class: Vec<f64>,
}

/// Train a freshly initialized model on `train`, optionally scoring `val`.
pub fn train_victim(
    train: &ImageDataset,
    val: Option<&ImageDataset>,
    config: &VictimConfig,
) -> Result<(ModelCheckpoint, EvalReport)> {
    config.validate()?;
    let spec = config.spec_for(train);
    let mut model = Model::<f32>::init(&spec)?;
    let shape = train.shape();
    let per = train.sample_len();
    let n = train.len();
    let defense = config.defense;
    let smoothed;
    let source: &[f32] = if defense.kind == DefenseKind::GaussianSmooth {
        smoothed = gaussian_smooth(train.images(), shape, defense.radius)?;
        &smoothed
    } else {
        train.images()
    };
    let order_seed = derive_seed(config.seed, &["victim", "order"]);
    let aug_seed = derive_seed(config.seed, &["victim", "augment"]);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &["victim", "defense"]));
    let np = model.num_params();
    let mut velocity = vec![0.0f32; np];
    let mut grad = vec![0.0f32; np];
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut batch_imgs = Vec::with_capacity(config.batch_size * per);
    let mut aug_buf = vec![0.0f32; per];
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[order_seed, epoch as u64]));
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            batch_imgs.clear();
            for &i in idx {
                batch_imgs.extend_from_slice(&source[i * per..(i + 1) * per]);
            }
            if defense.kind == DefenseKind::RandomLinfNoise {
                batch_imgs = random_noise_defense(&batch_imgs, defense.noise_eps, &mut noise_rng)?;
            }
            if config.augment {
                for (k, img) in batch_imgs.chunks_mut(per).enumerate() {
                    let a = Augmentation::draw(aug_seed, epoch, step, idx[k] as u64);
                    if !a.is_identity() {
                        a.apply(img, shape, &mut aug_buf);
                        img.copy_from_slice(&aug_buf);
                    }
                }
            }
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let loss = model
                .accumulate_param_gradient(&batch_imgs, &labels, LossKind::CrossEntropy, &mut grad)
                .map_err(|_| Error::Diverged { epoch, step })?;
            let inv = 1.0 / idx.len() as f32;
            grad.iter_mut().for_each(|g| *g *= inv);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, step });
            }
            epoch_loss += loss;
            if defense.kind == DefenseKind::Dpsgd {
                grad = dpsgd_transform(&grad, defense.clip, defense.sigma, &mut noise_rng)?;
            }
            let t = (epoch * steps_per_epoch + step) as f64 / (config.epochs * steps_per_epoch) as f64;
            let lr = config.schedule.at(config.lr, epoch, config.epochs, t) as f32;
            let (mu, wd) = (config.momentum as f32, config.weight_decay as f32);
            for ((p, v), g) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                let d = *g + wd * *p;
                *v = mu * *v + d;
                *p -= lr * *v;
            }
            if model.params().iter().any(|p| !p.is_finite()) {
                return Err(Error::Diverged { epoch, step });
            }
        }
        curve.push(epoch_loss / n as f64);
    }
    let mut ckpt = model.to_checkpoint();
    ckpt.history = TrainingHistory {
        epochs: config.epochs,
        loss_curve: curve.clone(),
        dataset_fingerprint: Some(train.fingerprint()),
    };
    let acc = val.map(|v| evaluate_detailed(&ckpt, v)).transpose()?;
    let report = EvalReport {
        val_acc: acc.as_ref().map(|a| a.overall),
        per_class_acc: acc.map(|a| a.per_class).unwrap_or_default(),
        loss_curve: curve,
        train_fingerprint: train.fingerprint(),
        config_fingerprint: config.fingerprint(),
    };
    Ok((ckpt, report))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Percentage of validation samples whose argmax prediction is correct.
pub fn evaluate_accuracy(checkpoint: &ModelCheckpoint, val: &ImageDataset) -> Result<f64> {
    Ok(evaluate_detailed(checkpoint, val)?.overall)
}

pub fn evaluate_detailed(checkpoint: &ModelCheckpoint, val: &ImageDataset) -> Result<Accuracy> {
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set".into()));
    }
    if val.classes() > checkpoint.spec.classes {
        return Err(Error::ShapeMismatch {
            expected: format!("at most {} classes", checkpoint.spec.classes),
            actual: val.classes().to_string(),
        });
    }
    let model = Model::<f32>::from_checkpoint(checkpoint)?;
    let k = checkpoint.spec.classes;
    let per = val.sample_len();
    let mut correct = vec![0usize; k];
    let mut count = vec![0usize; k];
    let batch = 256;
    for (b, imgs) in val.images().chunks(batch * per).enumerate() {
        let logits = model.logits(imgs)?;
        for (j, row) in logits.chunks(k).enumerate() {
            let y = val.labels()[b * batch + j];
            count[y] += 1;
            if argmax(row) == y {
                correct[y] += 1;
            }
        }
    }
    let total: usize = correct.iter().sum();
    Ok(Accuracy {
        overall: 100.0 * total as f64 / val.len() as f64,
        per_class: correct
            .iter()
            .zip(&count)
            .map(|(&c, &n)| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
            .collect(),
    })
}
