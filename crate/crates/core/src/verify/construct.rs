//! Hand-built instances with known behavior of the denominator term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{LossKind, Model};
use crate::real::{dot, norm};

fn summed_gradient(model: &Model<f64>, images: &[f64], labels: &[usize]) -> Result<Vec<f64>> {
    Ok(model.param_gradient(images, labels, LossKind::CrossEntropy)?.1.values)
}

/// Central-difference `d g_j / d x_{j,p}` of one sample's parameter gradient.
pub fn sample_gradient_derivative(
    model: &Model<f64>,
    images: &[f64],
    labels: &[usize],
    sample: usize,
    pixel: usize,
    h: f64,
) -> Result<Vec<f64>> {
    let per = model.spec().input_len();
    let mut image = images[sample * per..(sample + 1) * per].to_vec();
    let x = image[pixel];
    image[pixel] = x + h;
    let up = summed_gradient(model, &image, &[labels[sample]])?;
    image[pixel] = x - h;
    let down = summed_gradient(model, &image, &[labels[sample]])?;
    Ok(up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect())
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::DegenerateGradient("cannot normalize a zero vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `v` minus its component along the unit vector `u`.
fn reject(v: &[f64], u: &[f64]) -> Vec<f64> {
    let c = dot(v, u);
    v.iter().zip(u).map(|(a, b)| a - c * b).collect()
}

/// Move one pixel of a single-sample batch to a stationary point of `|G|`.
///
/// Scans `range` for a sign change of the central-difference derivative of
/// `|G|` and bisects inside the first bracket found.
pub fn stationary_norm_image(
    model: &Model<f64>,
    image: &[f64],
    label: usize,
    pixel: usize,
    range: (f64, f64),
    h: f64,
) -> Result<Vec<f64>> {
    let mut img = image.to_vec();
    let mut slope = |v: f64| -> Result<f64> {
        img[pixel] = v + h;
        let up = norm(&summed_gradient(model, &img, &[label])?);
        img[pixel] = v - h;
        let down = norm(&summed_gradient(model, &img, &[label])?);
        Ok((up - down) / (2.0 * h))
    };
    let cells = 400;
    let at = |k: usize| range.0 + (range.1 - range.0) * k as f64 / cells as f64;
    let mut bracket = None;
    let mut prev = slope(at(0))?;
    for k in 1..=cells {
        let s = slope(at(k))?;
        if s.signum() != prev.signum() {
            bracket = Some((at(k - 1), at(k), prev.signum()));
            break;
        }
        prev = s;
    }
    let Some((mut lo, mut hi, s_lo)) = bracket else {
        return Err(Error::InvalidArgument(format!(
            "no stationary point of the gradient norm in {range:?}"
        )));
    };
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if slope(mid)?.signum() == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut out = image.to_vec();
    out[pixel] = 0.5 * (lo + hi);
    Ok(out)
}

/// A target `T` orthogonal to `G` whose inner-product derivative dominates the
/// norm derivative at every listed pair.
///
/// Tries random sign combinations of the `G`-orthogonal parts of the
/// per-pixel derivatives and keeps the combination with the largest margin
/// `min_k (|d<T/|T|, g_j>| - |d|G||)`. Returns the target and that margin.
pub fn dominant_target(
    model: &Model<f64>,
    images: &[f64],
    labels: &[usize],
    pairs: &[(usize, usize)],
    trials: usize,
    seed: u64,
    h: f64,
) -> Result<(Vec<f64>, f64)> {
    let g_hat = unit(&summed_gradient(model, images, labels)?)?;
    let mut dn = Vec::with_capacity(pairs.len());
    let mut w = Vec::with_capacity(pairs.len());
    let mut vs = Vec::with_capacity(pairs.len());
    for &(s, p) in pairs {
        let v = sample_gradient_derivative(model, images, labels, s, p, h)?;
        dn.push(dot(&g_hat, &v).abs());
        w.push(unit(&reject(&v, &g_hat))?);
        vs.push(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..trials.max(1) {
        let mut t = vec![0.0; g_hat.len()];
        for wk in &w {
            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            t.iter_mut().zip(wk).for_each(|(a, b)| *a += s * b);
        }
        let Ok(t) = unit(&reject(&t, &g_hat)) else { continue };
        let margin = vs
            .iter()
            .zip(&dn)
            .map(|(v, d)| dot(&t, v).abs() - d)
            .fold(f64::INFINITY, f64::min);
        if best.as_ref().is_none_or(|(_, m)| margin > *m) {
            best = Some((t, margin));
        }
    }
    best.ok_or_else(|| Error::DegenerateGradient("no usable target direction".into()))
}

/// A target close to `G` at which the detached and joint pixel gradients have
/// opposite signs at `(sample, pixel)`.
///
/// With `v = d g_j / d x_p`, `w` the part of `v` orthogonal to `G` and
/// `dn = <G/|G|, v>`, the target `G/|G| - eta sign(dn) w/|w|` with
/// `eta = |dn| / (2 |w|)` halves the inner-product derivative while the
/// denominator term keeps the full `dn`, so `beta` and `beta - gamma` split.
pub fn sign_flip_target(
    model: &Model<f64>,
    images: &[f64],
    labels: &[usize],
    sample: usize,
    pixel: usize,
    h: f64,
) -> Result<Vec<f64>> {
    let g_hat = unit(&summed_gradient(model, images, labels)?)?;
    let v = sample_gradient_derivative(model, images, labels, sample, pixel, h)?;
    let dn = dot(&g_hat, &v);
    let w = reject(&v, &g_hat);
    let wn = norm(&w);
    if dn.abs() < 1e-6 || wn < 1e-9 {
        return Err(Error::DegenerateGradient(format!(
            "pixel {pixel} of sample {sample} has no usable norm derivative"
        )));
    }
    let eta = dn.abs() / (2.0 * wn);
    Ok(g_hat
        .iter()
        .zip(&w)
        .map(|(g, wi)| g - eta * dn.signum() * wi / wn)
        .collect())
}
