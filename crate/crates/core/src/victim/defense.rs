use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    None,
    Dpsgd,
    GaussianSmooth,
    RandomLinfNoise,
}

impl DefenseKind {
    pub fn id(self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Dpsgd => "dpsgd",
            DefenseKind::GaussianSmooth => "gaussian-smooth",
            DefenseKind::RandomLinfNoise => "random-linf-noise",
        }
    }
}

/// A training-time defense and its parameters; only those of `kind` are used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    #[serde(default = "default_kind")]
    pub kind: DefenseKind,
    /// DPSGD clipping norm of the minibatch gradient.
    #[serde(default = "default_clip")]
    pub clip: f64,
    /// DPSGD per-coordinate noise std.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Gaussian smoothing std in pixels.
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Magnitude of the random sign noise.
    #[serde(default = "default_noise_eps")]
    pub noise_eps: f64,
}

fn default_kind() -> DefenseKind {
    DefenseKind::None
}

fn default_clip() -> f64 {
    0.1
}

fn default_sigma() -> f64 {
    0.001
}

fn default_radius() -> f64 {
    2.0
}

fn default_noise_eps() -> f64 {
    8.0 / 255.0
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            kind: DefenseKind::None,
            clip: default_clip(),
            sigma: default_sigma(),
            radius: default_radius(),
            noise_eps: default_noise_eps(),
        }
    }
}

impl DefenseConfig {
    pub fn of(kind: DefenseKind) -> Self {
        DefenseConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidArgument(format!("{} {what} must be positive, got {v}", self.kind.id())));
        match self.kind {
            DefenseKind::None => {}
            DefenseKind::Dpsgd => {
                if !(self.clip > 0.0) {
                    return bad("clip", self.clip);
                }
                if !(self.sigma >= 0.0) {
                    return Err(Error::InvalidArgument(format!("dpsgd sigma must be non-negative, got {}", self.sigma)));
                }
            }
            DefenseKind::GaussianSmooth if !(self.radius > 0.0) => return bad("radius", self.radius),
            DefenseKind::RandomLinfNoise if !(self.noise_eps > 0.0 && self.noise_eps <= 1.0) => {
                return bad("noise_eps", self.noise_eps)
            }
            _ => {}
        }
        Ok(())
    }
}

/// Clip `grad` to norm `clip`, then add `N(0, sigma^2)` per coordinate.
pub fn dpsgd_transform<R: Rng + ?Sized>(grad: &[f32], clip: f64, sigma: f64, rng: &mut R) -> Result<Vec<f32>> {
    if !(clip > 0.0) || !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("dpsgd needs clip > 0 and sigma >= 0, got {clip}, {sigma}")));
    }
    let n = crate::real::norm(grad);
    let scale = if n > clip { clip / n } else { 1.0 };
    let mut out: Vec<f32> = grad.iter().map(|&g| (g as f64 * scale) as f32).collect();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        for v in &mut out {
            *v += noise.sample(rng) as f32;
        }
    }
    Ok(out)
}

/// Normalized Gaussian taps with std `sigma` over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-half..=half).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Per-channel separable Gaussian blur with std `radius` and reflect padding.
pub fn gaussian_smooth(images: &[f32], shape: [usize; 3], radius: f64) -> Result<Vec<f32>> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("smoothing radius must be positive, got {radius}")));
    }
    let [_, h, w] = shape;
    let k = gaussian_kernel(radius);
    let half = (k.len() / 2) as i64;
    let mut out = vec![0.0f32; images.len()];
    let mut rows = vec![0.0f64; h * w];
    for (plane, o) in images.chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for x in 0..w {
                rows[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * plane[y * w + reflect(x as i64 + t as i64 - half, w as i64)] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(t, kv)| kv * rows[reflect(y as i64 + t as i64 - half, h as i64) * w + x])
                    .sum();
                o[y * w + x] = (v as f32).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Adds `+-noise_eps` per pixel with fresh random signs, clamped to `[0,1]`.
pub fn random_noise_defense<R: Rng + ?Sized>(images: &[f32], noise_eps: f64, rng: &mut R) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&noise_eps) {
        return Err(Error::InvalidArgument(format!("noise_eps {noise_eps} outside [0,1]")));
    }
    if noise_eps == 0.0 {
        return Ok(images.to_vec());
    }
    let e = noise_eps as f32;
    Ok(images
        .iter()
        .map(|&x| {
            let d = if rng.random_bool(0.5) { e } else { -e };
            crate::data::perturbation::perturb_pixel(x, d, e)
        })
        .collect())
}
