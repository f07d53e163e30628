use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crafting::{compute_target_gradient, craft_observed, target_seed, CraftConfig, CraftMode, StepEvent};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::hash::mix_seed;
use crate::nn::{LossKind, Model, ModelCheckpoint};
use crate::objectives::alignment_loss;
use crate::real::{dot, norm};

/// Values below this magnitude count as sign 0.
pub const SIGN_ZERO: f64 = 1e-10;
/// Slack allowed on the `|gamma|` bound.
pub const GAMMA_SLACK: f64 = 1e-6;
/// Default central-difference step for pixel derivatives.
pub const DEFAULT_STEP: f64 = 1e-5;

pub fn sign(v: f64) -> i8 {
    if v.abs() < SIGN_ZERO {
        0
    } else if v > 0.0 {
        1
    } else {
        -1
    }
}

/// One probed `(sample, pixel)` at one crafting state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelRecord {
    /// Which instance family produced the probe.
    pub origin: String,
    pub sample: usize,
    /// Flat index into the sample, `C x H x W` order.
    pub pixel: usize,
    pub restart: Option<usize>,
    pub step: Option<usize>,
    /// `cos(T, G)`.
    pub alpha: f64,
    /// Derivative of the detached objective's inner product, `d<T,g_j> / (|T| |G|)`.
    pub beta: f64,
    /// Denominator term, `alpha * d|G| / |G|`.
    pub gamma: f64,
    pub abs_beta: f64,
    pub abs_gamma: f64,
    /// `d|G|` at this pixel.
    pub d_norm: f64,
    /// `d<T/|T|, g_j>`.
    pub d_inner: f64,
    /// `d<T, g_j>` at the scale `T` was supplied in.
    pub d_inner_raw: f64,
    /// `|T|`.
    pub c0: f64,
    pub grad_norm: f64,
    /// Angle between `g_j` and `T`, radians; absent when `g_j = 0`.
    pub phi: Option<f64>,
    /// `|d|G|| < |d<T/|T|, g_j>|`.
    pub inequality_holds: bool,
    /// The same inequality with `T` at its supplied scale.
    pub inequality_holds_raw: bool,
    /// Sign of `beta`; the detached objective descends along `-beta`.
    pub sign_detached: i8,
    /// Sign of `beta - gamma`; the joint objective descends along `-(beta - gamma)`.
    pub sign_joint: i8,
    pub signs_match: bool,
    /// `|gamma| <= |d|G|| / |G| + slack`.
    pub gamma_bound_ok: bool,
    /// `|(beta - gamma) + dA|` with `dA` a direct central difference of the
    /// joint alignment loss.
    pub joint_residual: f64,
}

impl PixelRecord {
    pub fn violates(&self) -> bool {
        self.inequality_holds && !self.signs_match
    }
}

/// Pixel derivatives of one crafting state `S + Delta` against target `T`.
pub struct PropositionProbe<'a> {
    model: &'a Model<f64>,
    images: &'a [f64],
    labels: &'a [usize],
    target: &'a [f64],
    target_norm: f64,
    grad: Vec<f64>,
    grad_norm: f64,
    dot: f64,
    per: usize,
    h: f64,
}

impl<'a> PropositionProbe<'a> {
    pub fn new(
        model: &'a Model<f64>,
        images: &'a [f64],
        labels: &'a [usize],
        target: &'a [f64],
        h: f64,
    ) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
        }
        if target.len() != model.num_params() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} target entries", model.num_params()),
                actual: target.len().to_string(),
            });
        }
        let (_, g) = model.param_gradient(images, labels, LossKind::CrossEntropy)?;
        let a = alignment_loss(target, &g.values)?;
        Ok(PropositionProbe {
            model,
            images,
            labels,
            target,
            target_norm: a.target_norm,
            grad: g.values,
            grad_norm: a.grad_norm,
            dot: a.dot,
            per: model.spec().input_len(),
            h,
        })
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn sample_len(&self) -> usize {
        self.per
    }

    fn sample_gradient(&self, image: &[f64], label: usize) -> Result<Vec<f64>> {
        Ok(self.model.param_gradient(image, &[label], LossKind::CrossEntropy)?.1.values)
    }

    /// Central-difference quantities at `(sample, pixel)`.
    pub fn check(&self, sample: usize, pixel: usize, origin: &str) -> Result<PixelRecord> {
        if sample >= self.samples() || pixel >= self.per {
            return Err(Error::InvalidArgument(format!(
                "probe ({sample}, {pixel}) outside {} samples of {} pixels",
                self.samples(),
                self.per
            )));
        }
        let label = self.labels[sample];
        let mut image = self.images[sample * self.per..(sample + 1) * self.per].to_vec();
        let g_j = self.sample_gradient(&image, label)?;
        let rest: Vec<f64> = self.grad.iter().zip(&g_j).map(|(g, s)| g - s).collect();
        let x = image[pixel];
        let mut side = |v: f64| -> Result<(f64, f64, f64)> {
            image[pixel] = v;
            let g = self.sample_gradient(&image, label)?;
            let full: Vec<f64> = rest.iter().zip(&g).map(|(r, s)| r + s).collect();
            let a = alignment_loss(self.target, &full)?;
            Ok((dot(self.target, &g), a.grad_norm, a.dot / (a.target_norm * a.grad_norm)))
        };
        let (ip_up, n_up, cos_up) = side(x + self.h)?;
        let (ip_dn, n_dn, cos_dn) = side(x - self.h)?;
        let two_h = 2.0 * self.h;
        let d_inner_raw = (ip_up - ip_dn) / two_h;
        let d_norm = (n_up - n_dn) / two_h;
        // dA = -dcos
        let d_align = -(cos_up - cos_dn) / two_h;

        let n = self.grad_norm;
        let c0 = self.target_norm;
        let d_inner = d_inner_raw / c0;
        let alpha = (self.dot / (c0 * n)).clamp(-1.0, 1.0);
        let beta = d_inner / n;
        let gamma = alpha * d_norm / n;
        let (sd, sj) = (sign(beta), sign(beta - gamma));
        let gj_norm = norm(&g_j);
        let phi = (gj_norm > 0.0).then(|| (dot(self.target, &g_j) / (c0 * gj_norm)).clamp(-1.0, 1.0).acos());
        let bound = d_norm.abs() / n;
        Ok(PixelRecord {
            origin: origin.to_string(),
            sample,
            pixel,
            restart: None,
            step: None,
            alpha,
            beta,
            gamma,
            abs_beta: beta.abs(),
            abs_gamma: gamma.abs(),
            d_norm,
            d_inner,
            d_inner_raw,
            c0,
            grad_norm: n,
            phi,
            inequality_holds: d_norm.abs() < d_inner.abs(),
            inequality_holds_raw: d_norm.abs() < d_inner_raw.abs(),
            sign_detached: sd,
            sign_joint: sj,
            signs_match: sd == sj,
            gamma_bound_ok: gamma.abs() <= bound + GAMMA_SLACK * bound.max(1.0),
            joint_residual: ((beta - gamma) + d_align).abs(),
        })
    }
}

/// Check one `(sample, pixel)` of the state `perturbed` against `target`.
pub fn proposition_check(
    model: &Model<f64>,
    perturbed: &[f64],
    labels: &[usize],
    target: &[f64],
    sample: usize,
    pixel: usize,
    h: f64,
) -> Result<PixelRecord> {
    PropositionProbe::new(model, perturbed, labels, target, h)?.check(sample, pixel, "single")
}

/// `pixels` seeded `(sample, pixel)` pairs spread over up to `samples` samples.
pub fn random_probes(n: usize, per: usize, samples: usize, pixels: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = {
        let mut c = sample(&mut rng, n, samples.min(n)).into_vec();
        c.sort_unstable();
        c
    };
    let mut out = Vec::with_capacity(pixels);
    let each = pixels.div_ceil(chosen.len().max(1));
    for &s in &chosen {
        let take = each.min(per).min(pixels - out.len());
        let mut px = sample(&mut rng, per, take).into_vec();
        px.sort_unstable();
        out.extend(px.into_iter().map(|p| (s, p)));
        if out.len() == pixels {
            break;
        }
    }
    out
}

/// Every `(sample, pixel)` pair; only offered for images of at most 4x4.
pub fn exhaustive_probes(n: usize, shape: [usize; 3]) -> Result<Vec<(usize, usize)>> {
    let [c, h, w] = shape;
    if h * w > 16 {
        return Err(Error::InvalidArgument(format!(
            "exhaustive probing is limited to 4x4 images, got {h}x{w}"
        )));
    }
    Ok((0..n).flat_map(|s| (0..c * h * w).map(move |p| (s, p))).collect())
}

/// Counts over a set of records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub probed: usize,
    pub inequality_holds: usize,
    pub signs_match: usize,
    /// Inequality held but signs differed.
    pub violations: usize,
}

/// Aggregation over each `(origin, restart, sample, pixel)` trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTally {
    pub trajectories: usize,
    /// Inequality held at every probed step.
    pub inequality_every_step: usize,
    /// Of those, signs matched at every probed step.
    pub signs_match_every_step: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PropositionSummary {
    pub overall: Tally,
    /// The inequality evaluated with `T` at its supplied scale.
    pub raw_scale: Tally,
    pub gamma_bound_failures: usize,
    pub max_joint_residual: f64,
    pub per_origin: BTreeMap<String, Tally>,
    pub trajectory: TrajectoryTally,
    /// Only the last probed step of each trajectory.
    pub final_step: Tally,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub records: Vec<PixelRecord>,
    pub summary: PropositionSummary,
}

fn tally<'r>(records: impl Iterator<Item = &'r PixelRecord>, raw: bool) -> Tally {
    let mut t = Tally::default();
    for r in records {
        let holds = if raw { r.inequality_holds_raw } else { r.inequality_holds };
        t.probed += 1;
        t.inequality_holds += holds as usize;
        t.signs_match += r.signs_match as usize;
        t.violations += (holds && !r.signs_match) as usize;
    }
    t
}

type TrajectoryKey = (String, Option<usize>, usize, usize);

impl PropositionReport {
    pub fn from_records(records: Vec<PixelRecord>) -> Self {
        let mut per_origin = BTreeMap::new();
        for r in &records {
            per_origin.entry(r.origin.clone()).or_insert_with(Vec::new).push(r);
        }
        let per_origin = per_origin
            .into_iter()
            .map(|(k, v)| (k, tally(v.into_iter(), false)))
            .collect();

        let mut paths: BTreeMap<TrajectoryKey, Vec<&PixelRecord>> = BTreeMap::new();
        for r in &records {
            paths.entry((r.origin.clone(), r.restart, r.sample, r.pixel)).or_default().push(r);
        }
        let mut trajectory = TrajectoryTally::default();
        let mut last = Vec::new();
        for path in paths.values() {
            trajectory.trajectories += 1;
            if path.iter().all(|r| r.inequality_holds) {
                trajectory.inequality_every_step += 1;
                if path.iter().all(|r| r.signs_match) {
                    trajectory.signs_match_every_step += 1;
                } else {
                    trajectory.violations += 1;
                }
            }
            last.push(*path.iter().max_by_key(|r| r.step).expect("non-empty path"));
        }

        let summary = PropositionSummary {
            overall: tally(records.iter(), false),
            raw_scale: tally(records.iter(), true),
            gamma_bound_failures: records.iter().filter(|r| !r.gamma_bound_ok).count(),
            max_joint_residual: records.iter().map(|r| r.joint_residual).fold(0.0, f64::max),
            per_origin,
            trajectory,
            final_step: tally(last.into_iter(), false),
        };
        PropositionReport { records, summary }
    }

    pub fn merge(reports: impl IntoIterator<Item = PropositionReport>) -> Self {
        Self::from_records(reports.into_iter().flat_map(|r| r.records).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table of the summary counts.
    pub fn summary_table(&self) -> String {
        let s = &self.summary;
        let mut out = String::new();
        let row = |out: &mut String, name: &str, t: &Tally| {
            let _ = writeln!(
                out,
                "{name:<24} {:>8} {:>10} {:>12} {:>10}",
                t.probed, t.inequality_holds, t.signs_match, t.violations
            );
        };
        let _ = writeln!(out, "{:<24} {:>8} {:>10} {:>12} {:>10}", "instances", "probed", "ineq", "signs-match", "violations");
        for (k, t) in &s.per_origin {
            row(&mut out, k, t);
        }
        row(&mut out, "all", &s.overall);
        row(&mut out, "all (raw target scale)", &s.raw_scale);
        row(&mut out, "final step only", &s.final_step);
        let t = &s.trajectory;
        let _ = writeln!(
            out,
            "trajectories: {} total, {} with the inequality at every step, {} of those sign-consistent, {} violations",
            t.trajectories, t.inequality_every_step, t.signs_match_every_step, t.violations
        );
        let _ = writeln!(
            out,
            "gamma bound failures: {}; max joint residual: {:.3e}",
            s.gamma_bound_failures, s.max_joint_residual
        );
        out
    }
}

/// Probe every listed pair on one crafting state.
pub fn verify_state(probe: &PropositionProbe<'_>, probes: &[(usize, usize)], origin: &str) -> Result<Vec<PixelRecord>> {
    probes.iter().map(|&(s, p)| probe.check(s, p, origin)).collect()
}

/// Options for probing states along a joint crafting run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganicProbing {
    /// Probe every `every`-th step (0 is treated as 1).
    pub every: usize,
    pub samples: usize,
    pub pixels: usize,
    pub seed: u64,
    pub h: f64,
}

impl Default for OrganicProbing {
    fn default() -> Self {
        OrganicProbing {
            every: 1,
            samples: 8,
            pixels: 64,
            seed: 0,
            h: DEFAULT_STEP,
        }
    }
}

/// Run joint crafting and probe the un-augmented objective at visited states.
///
/// The state after step `k` of restart `r` is probed when `k % every == 0`.
pub fn verify_crafting_run(
    checkpoint: &ModelCheckpoint,
    dataset: &ImageDataset,
    config: &CraftConfig,
    probing: &OrganicProbing,
) -> Result<PropositionReport> {
    if config.mode != CraftMode::Joint {
        return Err(Error::InvalidArgument("organic probing follows joint crafting".into()));
    }
    let model32 = Model::<f32>::from_checkpoint(checkpoint)?;
    let model = Model::<f64>::from_checkpoint(checkpoint)?;
    let every = probing.every.max(1);
    let mut targets: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut records = Vec::new();
    let mut failure: Option<Error> = None;
    let per = dataset.sample_len();
    let mut observer = |e: &StepEvent<'_>| {
        if failure.is_some() || e.step % every != 0 {
            return;
        }
        let mut run = || -> Result<Vec<PixelRecord>> {
            if !targets.contains_key(&e.split) {
                let split = dataset.select(e.indices)?;
                let t = compute_target_gradient(
                    &model32,
                    &split,
                    &config.target_source,
                    target_seed(config.seed),
                    config.batch_size,
                )?;
                targets.insert(e.split, t.gradient.values.iter().map(|v| *v as f64).collect());
            }
            let target = &targets[&e.split];
            let mut images = Vec::with_capacity(e.deltas.len());
            for (k, &i) in e.indices.iter().enumerate() {
                let clean = dataset.image(i);
                images.extend(clean.iter().zip(&e.deltas[k * per..(k + 1) * per]).map(|(x, d)| (*x + *d) as f64));
            }
            let labels: Vec<usize> = e.indices.iter().map(|&i| dataset.labels()[i]).collect();
            let probe = PropositionProbe::new(&model, &images, &labels, target, probing.h)?;
            let pairs = random_probes(
                labels.len(),
                per,
                probing.samples,
                probing.pixels,
                mix_seed(&[probing.seed, e.split as u64, e.restart as u64, e.step as u64]),
            );
            let mut out = verify_state(&probe, &pairs, "organic")?;
            for r in &mut out {
                r.sample = e.indices[r.sample];
                r.restart = Some(e.restart);
                r.step = Some(e.step);
            }
            Ok(out)
        };
        match run() {
            Ok(r) => records.extend(r),
            Err(err) => failure = Some(err),
        }
    };
    craft_observed(checkpoint, dataset, config, &mut observer)?;
    if let Some(err) = failure {
        return Err(err);
    }
    Ok(PropositionReport::from_records(records))
}
