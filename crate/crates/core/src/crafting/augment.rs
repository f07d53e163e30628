use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::hash::mix_seed;

pub const MAX_SHIFT: i32 = 4;

/// Horizontal flip followed by an integer translation with zero fill.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Augmentation {
    pub flip: bool,
    pub dy: i32,
    pub dx: i32,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { flip: false, dy: 0, dx: 0 };

    /// Deterministic draw for one sample at one crafting step.
    pub fn draw(seed: u64, restart: usize, step: usize, sample_key: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, restart as u64, step as u64, sample_key]));
        Augmentation {
            flip: rng.random_bool(0.5),
            dy: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            dx: rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Input pixel that lands on output pixel `(y, x)`, if any.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> Option<(usize, usize)> {
        let sy = y as i32 - self.dy;
        let sx = x as i32 - self.dx;
        if sy < 0 || sx < 0 || sy >= h as i32 || sx >= w as i32 {
            return None;
        }
        let sx = if self.flip { w as i32 - 1 - sx } else { sx };
        Some((sy as usize, sx as usize))
    }

    /// `out = A img` for one planar `C x H x W` image.
    pub fn apply(&self, img: &[f32], shape: [usize; 3], out: &mut [f32]) {
        let [c, h, w] = shape;
        for ch in 0..c {
            let plane = ch * h * w;
            for y in 0..h {
                for x in 0..w {
                    out[plane + y * w + x] = match self.source(y, x, h, w) {
                        Some((sy, sx)) => img[plane + sy * w + sx],
                        None => 0.0,
                    };
                }
            }
        }
    }

    /// `out = A^T grad`.
    pub fn adjoint(&self, grad: &[f32], shape: [usize; 3], out: &mut [f32]) {
        let [c, h, w] = shape;
        out.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..c {
            let plane = ch * h * w;
            for y in 0..h {
                for x in 0..w {
                    if let Some((sy, sx)) = self.source(y, x, h, w) {
                        out[plane + sy * w + sx] += grad[plane + y * w + x];
                    }
                }
            }
        }
    }
}

/// Apply per-sample augmentations to a batch of planar images.
pub fn diff_augment(batch: &[f32], shape: [usize; 3], draws: &[Augmentation]) -> Vec<f32> {
    let per: usize = shape.iter().product();
    let mut out = vec![0.0; batch.len()];
    for ((img, o), a) in batch.chunks(per).zip(out.chunks_mut(per)).zip(draws) {
        a.apply(img, shape, o);
    }
    out
}

/// Backpropagate through [`diff_augment`].
pub fn diff_augment_adjoint(grad: &[f32], shape: [usize; 3], draws: &[Augmentation]) -> Vec<f32> {
    let per: usize = shape.iter().product();
    let mut out = vec![0.0; grad.len()];
    for ((g, o), a) in grad.chunks(per).zip(out.chunks_mut(per)).zip(draws) {
        a.adjoint(g, shape, o);
    }
    out
}
