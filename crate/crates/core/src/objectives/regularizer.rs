//! Perceptual penalties on the perturbation, summed over images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    L2,
    Tv,
    Ssim,
}

impl std::str::FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Regularizer::None),
            "l2" => Ok(Regularizer::L2),
            "tv" => Ok(Regularizer::Tv),
            "ssim" => Ok(Regularizer::Ssim),
            other => Err(Error::InvalidArgument(format!("unknown regularizer `{other}`"))),
        }
    }
}

fn check(delta: &[f32], clean: &[f32], perturbed: &[f32], shape: [usize; 3], weight: f64) -> Result<usize> {
    let per: usize = shape.iter().product();
    if per == 0 || delta.len() % per != 0 || clean.len() != delta.len() || perturbed.len() != delta.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("equal-length buffers of whole {shape:?} images"),
            actual: format!("{} / {} / {}", delta.len(), clean.len(), perturbed.len()),
        });
    }
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::InvalidArgument(format!("regularizer weight {weight}")));
    }
    Ok(delta.len() / per)
}

/// `weight * R`, where `R` is `|delta|^2`, the anisotropic total variation of
/// the perturbed images, or `sum_i (1 - SSIM(clean_i, perturbed_i))`.
pub fn regularizer(
    delta: &[f32],
    clean: &[f32],
    perturbed: &[f32],
    shape: [usize; 3],
    kind: Regularizer,
    weight: f64,
) -> Result<f64> {
    let n = check(delta, clean, perturbed, shape, weight)?;
    let per = delta.len() / n.max(1);
    let raw: f64 = match kind {
        Regularizer::None => return Ok(0.0),
        Regularizer::L2 => delta.iter().map(|&d| (d as f64).powi(2)).sum(),
        Regularizer::Tv => perturbed.chunks(per).map(|img| tv(img, shape, None)).sum(),
        Regularizer::Ssim => clean
            .chunks(per)
            .zip(perturbed.chunks(per))
            .map(|(x, y)| 1.0 - ssim(x, y, shape, None))
            .sum(),
    };
    Ok(weight * raw)
}

/// Value and derivative with respect to `delta`, for `perturbed = clean + delta`.
pub fn regularizer_gradient(
    delta: &[f32],
    clean: &[f32],
    perturbed: &[f32],
    shape: [usize; 3],
    kind: Regularizer,
    weight: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = check(delta, clean, perturbed, shape, weight)?;
    let per = delta.len() / n.max(1);
    let mut grad = vec![0.0; delta.len()];
    let raw: f64 = match kind {
        Regularizer::None => return Ok((0.0, grad)),
        Regularizer::L2 => {
            for (g, &d) in grad.iter_mut().zip(delta) {
                *g = 2.0 * d as f64;
            }
            delta.iter().map(|&d| (d as f64).powi(2)).sum()
        }
        Regularizer::Tv => perturbed
            .chunks(per)
            .zip(grad.chunks_mut(per))
            .map(|(img, g)| tv(img, shape, Some(g)))
            .sum(),
        Regularizer::Ssim => {
            let mut total = 0.0;
            for ((x, y), g) in clean.chunks(per).zip(perturbed.chunks(per)).zip(grad.chunks_mut(per)) {
                total += 1.0 - ssim(x, y, shape, Some(g));
                g.iter_mut().for_each(|v| *v = -*v);
            }
            total
        }
    };
    grad.iter_mut().for_each(|g| *g *= weight);
    Ok((weight * raw, grad))
}

/// Sum of absolute horizontal and vertical forward differences of one image.
/// With `grad`, accumulates a subgradient (zero where a difference vanishes).
pub fn tv(img: &[f32], shape: [usize; 3], mut grad: Option<&mut [f64]>) -> f64 {
    let [c, h, w] = shape;
    let mut total = 0.0;
    let mut term = |a: usize, b: usize, grad: &mut Option<&mut [f64]>| {
        let d = img[b] as f64 - img[a] as f64;
        total += d.abs();
        if let Some(g) = grad.as_deref_mut() {
            let s = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            g[b] += s;
            g[a] -= s;
        }
    };
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let p = (ch * h + y) * w + x;
                if x + 1 < w {
                    term(p, p + 1, &mut grad);
                }
                if y + 1 < h {
                    term(p, p + w, &mut grad);
                }
            }
        }
    }
    total
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let mid = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - mid).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable valid correlation of an `h x w` plane with `g (x) g`.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| g[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| g[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `oh x ow` map back onto `h x w`.
fn filter_valid_adjoint(map: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..oh {
        for x in 0..ow {
            for t in 0..k {
                rows[(y + t) * ow + x] += g[t] * map[y * ow + x];
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            for t in 0..k {
                out[y * w + x + t] += g[t] * rows[y * ow + x];
            }
        }
    }
    out
}

/// Mean SSIM over channels and valid window positions.
///
/// The window is the standard 11x11 Gaussian with sigma 1.5, shrunk to the
/// largest odd size that fits when images are smaller. With `grad`, writes
/// `dSSIM/dy` (overwriting).
pub fn ssim(x: &[f32], y: &[f32], shape: [usize; 3], grad: Option<&mut [f64]>) -> f64 {
    let [c, h, w] = shape;
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let g = gaussian_window(size);
    let plane = h * w;
    let (oh, ow) = (h - size + 1, w - size + 1);
    let count = (c * oh * ow) as f64;
    let mut total = 0.0;
    let mut grad = grad;
    for ch in 0..c {
        let xp: Vec<f64> = x[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let yp: Vec<f64> = y[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).collect();
        let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<f64>>();
        let mx = filter_valid(&xp, h, w, &g);
        let my = filter_valid(&yp, h, w, &g);
        let exx = filter_valid(&sq(&xp, &xp), h, w, &g);
        let eyy = filter_valid(&sq(&yp, &yp), h, w, &g);
        let exy = filter_valid(&sq(&xp, &yp), h, w, &g);
        let m = oh * ow;
        let (mut ca, mut cb, mut cc) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for l in 0..m {
            let (ux, uy) = (mx[l], my[l]);
            let sxx = exx[l] - ux * ux;
            let syy = eyy[l] - uy * uy;
            let sxy = exy[l] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if grad.is_some() {
                let d_mu = 2.0 * ux * a2 / (b1 * b2) - s * 2.0 * uy / b1;
                let d_sxy = 2.0 * a1 / (b1 * b2);
                let d_syy = -s / b2;
                // dS/dy_p = w (d_mu + d_syy (2 y_p - 2 uy) + d_sxy (x_p - ux))
                ca[l] = (d_mu - 2.0 * uy * d_syy - ux * d_sxy) / count;
                cb[l] = 2.0 * d_syy / count;
                cc[l] = d_sxy / count;
            }
        }
        if let Some(gr) = grad.as_deref_mut() {
            let a = filter_valid_adjoint(&ca, h, w, &g);
            let b = filter_valid_adjoint(&cb, h, w, &g);
            let cx = filter_valid_adjoint(&cc, h, w, &g);
            for p in 0..plane {
                gr[ch * plane + p] = a[p] + b[p] * yp[p] + cx[p] * xp[p];
            }
        }
    }
    total / count
}
