//! Procedural class-conditional images for runs without a downloaded dataset.
//!
//! Every class owns a colored oriented grating and a colored blob. Samples jitter
//! phase, contrast, blob position and brightness, mix in a weaker pattern from a
//! random other class, and add pixel noise, so classes overlap and a small
//! convnet lands well below perfect accuracy.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageDataset, SplitTag};
use crate::error::Result;
use crate::hash::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_shape")]
    pub shape: [usize; 3],
    /// Seeds the class prototypes; train and val splits must share it.
    pub world_seed: u64,
    /// Seeds the per-sample draws.
    pub sample_seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f32,
}

fn default_classes() -> usize {
    10
}

fn default_shape() -> [usize; 3] {
    [3, 32, 32]
}

fn default_noise() -> f32 {
    0.08
}

struct Prototype {
    freq: f32,
    angle: f32,
    grating_color: Vec<f32>,
    blob_color: Vec<f32>,
    blob_center: (f32, f32),
    blob_radius: f32,
}

impl Prototype {
    fn draw(rng: &mut ChaCha8Rng, class: usize, classes: usize, channels: usize) -> Self {
        let color = |rng: &mut ChaCha8Rng| -> Vec<f32> { (0..channels).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
        Prototype {
            freq: rng.random_range(1.5f32..4.5),
            angle: PI * (class as f32 + rng.random_range(-0.25f32..0.25)) / classes as f32,
            grating_color: color(rng),
            blob_color: color(rng),
            blob_center: (rng.random_range(0.25f32..0.75), rng.random_range(0.25f32..0.75)),
            blob_radius: rng.random_range(0.12f32..0.25),
        }
    }

    /// Adds `weight` times this pattern into a planar `C x H x W` buffer.
    fn render(&self, out: &mut [f32], shape: [usize; 3], phase: f32, shift: (f32, f32), weight: f32) {
        let [c, h, w] = shape;
        let (ca, sa) = (self.angle.cos(), self.angle.sin());
        let (cy, cx) = (self.blob_center.0 + shift.0, self.blob_center.1 + shift.1);
        let r2 = self.blob_radius * self.blob_radius;
        for y in 0..h {
            let fy = (y as f32 + 0.5) / h as f32;
            for x in 0..w {
                let fx = (x as f32 + 0.5) / w as f32;
                let g = (2.0 * PI * self.freq * (fx * ca + fy * sa) + phase).sin();
                let d2 = (fy - cy).powi(2) + (fx - cx).powi(2);
                let blob = (-d2 / (2.0 * r2)).exp();
                for ch in 0..c {
                    out[(ch * h + y) * w + x] +=
                        weight * (0.22 * g * self.grating_color[ch] + 0.35 * blob * self.blob_color[ch]);
                }
            }
        }
    }
}

/// Balanced labels (`i mod K`); ids `syn-<sample_seed>-<index>`.
pub fn synthetic_dataset(spec: &SyntheticSpec, split: SplitTag) -> Result<ImageDataset> {
    let [c, h, w] = spec.shape;
    let per = c * h * w;
    let k = spec.classes.max(1);
    let mut world = ChaCha8Rng::seed_from_u64(derive_seed(spec.world_seed, &["synthetic", "world"]));
    let protos: Vec<Prototype> = (0..k).map(|j| Prototype::draw(&mut world, j, k, c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.sample_seed, &["synthetic", "samples"]));
    let noise = Normal::new(0.0f32, spec.noise.max(0.0)).expect("finite noise");
    let mut images = vec![0.0f32; spec.samples * per];
    let mut labels = Vec::with_capacity(spec.samples);
    let mut ids = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let y = i % k;
        let img = &mut images[i * per..(i + 1) * per];
        let base = 0.5 + rng.random_range(-0.12f32..0.12);
        img.iter_mut().for_each(|v| *v = base);
        let contrast = rng.random_range(0.5f32..1.3);
        let shift = (rng.random_range(-0.2f32..0.2), rng.random_range(-0.2f32..0.2));
        protos[y].render(img, spec.shape, rng.random_range(0.0..2.0 * PI), shift, contrast);
        let other = (y + rng.random_range(1..k.max(2))) % k;
        let dshift = (rng.random_range(-0.25f32..0.25), rng.random_range(-0.25f32..0.25));
        let dweight = rng.random_range(0.2f32..0.7);
        protos[other].render(img, spec.shape, rng.random_range(0.0..2.0 * PI), dshift, dweight);
        for v in img.iter_mut() {
            // 8-bit quantized like real image data.
            *v = ((*v + noise.sample(&mut rng)).clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        labels.push(y);
        ids.push(format!("syn-{}-{i:06}", spec.sample_seed));
    }
    ImageDataset::new(images, labels, ids, spec.shape, k, split)
}
