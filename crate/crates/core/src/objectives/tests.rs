use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use super::*;

#[test]
fn cross_entropy_analytic_values() {
    assert_abs_diff_eq!(cross_entropy(&[0.0; 10], 3), 10f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(cross_entropy(&[0.0, 0.0], 1), 2f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(cross_entropy(&[80.0, 0.0, 0.0], 0), 0.0, epsilon = 1e-12);
    // Floor at p = 1e-12.
    assert_abs_diff_eq!(cross_entropy(&[0.0, 500.0], 0), -(1e-12f64).ln(), epsilon = 1e-9);
}

#[test]
fn reverse_cross_entropy_analytic_values() {
    assert_abs_diff_eq!(reverse_cross_entropy(&[0.0; 10], 0), -(0.9f64).ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(reverse_cross_entropy(&[0.0, 0.0], 0), 2f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(reverse_cross_entropy(&[-80.0, 0.0], 0), 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(reverse_cross_entropy(&[500.0, 0.0], 0), -(1e-12f64).ln(), epsilon = 1e-9);
    assert_abs_diff_eq!(reverse_cross_entropy(&[0.3, 0.3], 1), cross_entropy(&[0.3, 0.3], 1), epsilon = 1e-12);
}

#[test]
fn alignment_reference_cases() {
    let t = [1.0, 2.0, -0.5];
    let neg: Vec<f64> = t.iter().map(|v| -v).collect();
    assert_abs_diff_eq!(alignment_loss(&t, &t).unwrap().value, 0.0, epsilon = 1e-15);
    assert_abs_diff_eq!(alignment_loss(&t, &neg).unwrap().value, 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(alignment_loss(&t, &[2.0, -1.0, 0.0]).unwrap().value, 1.0, epsilon = 1e-15);
    assert!(matches!(alignment_loss(&t, &[0.0; 3]), Err(Error::DegenerateGradient(_))));
    assert!(matches!(alignment_loss(&[0.0; 3], &t), Err(Error::DegenerateGradient(_))));
}

#[test]
fn alignment_gradient_matches_finite_differences() {
    let t = [0.3, -1.2, 0.7, 2.0];
    let g = [1.1, 0.4, -0.3, 0.9];
    let (_, grad) = alignment_loss_gradient(&t, &g).unwrap();
    let h = 1e-6;
    for i in 0..4 {
        let mut gp = g;
        let mut gm = g;
        gp[i] += h;
        gm[i] -= h;
        let fd = (alignment_loss(&t, &gp).unwrap().value - alignment_loss(&t, &gm).unwrap().value) / (2.0 * h);
        assert_abs_diff_eq!(grad[i], fd, epsilon = 1e-8);
    }
}

#[test]
fn detached_matches_value_and_freezes_denominator() {
    let t = [0.3, -1.2, 0.7];
    let g = [1.1, 0.4, -0.3];
    let c = norm(&g);
    assert_abs_diff_eq!(
        alignment_loss_detached(&t, &g, c).unwrap(),
        alignment_loss(&t, &g).unwrap().value,
        epsilon = 1e-14
    );
    let grad = alignment_loss_detached_gradient(&t, c).unwrap();
    let h = 1e-6;
    for i in 0..3 {
        let mut gp = g;
        let mut gm = g;
        gp[i] += h;
        gm[i] -= h;
        let fd = (alignment_loss_detached(&t, &gp, c).unwrap() - alignment_loss_detached(&t, &gm, c).unwrap()) / (2.0 * h);
        assert_abs_diff_eq!(grad[i], fd, epsilon = 1e-8);
    }
    assert!(alignment_loss_detached(&t, &g, 0.0).is_err());
}

#[test]
fn tensorclog_values() {
    assert_eq!(tensorclog_loss(&[0.0f64, 0.0]), 0.0);
    assert_eq!(tensorclog_loss(&[3.0f64, 4.0]), 5.0);
    assert_eq!(tensorclog_loss(&[6.0f64, 8.0]), 10.0);
    assert_eq!(tensorclog_loss_gradient(&[3.0f64, 4.0]), vec![0.6, 0.8]);
    assert_eq!(tensorclog_loss_gradient(&[0.0f64, 0.0]), vec![0.0, 0.0]);
}

#[test]
fn objective_validation() {
    assert!(Objective::new(ObjectiveKind::RandomNoise).validate().is_ok());
    assert!(Objective::new(ObjectiveKind::RandomNoise)
        .with_regularizer(Regularizer::L2, 0.0)
        .validate()
        .is_err());
    assert!(Objective::new(ObjectiveKind::AlignJoint)
        .with_regularizer(Regularizer::Tv, -1.0)
        .validate()
        .is_err());
    assert!("ssimm".parse::<Regularizer>().is_err());
    let parsed: Objective = toml::from_str("kind = \"align-joint\"\nregularizer = \"tv\"\nreg_weight = 0.5").unwrap();
    assert_eq!(parsed, Objective::new(ObjectiveKind::AlignJoint).with_regularizer(Regularizer::Tv, 0.5));
}

fn image(seed: u64, len: usize) -> Vec<f32> {
    (0..len)
        .map(|i| (((i as u64 * 7919 + seed * 104729) % 1000) as f32 / 1000.0) * 0.8 + 0.1)
        .collect()
}

#[test]
fn regularizer_reference_values() {
    let shape = [3, 12, 12];
    let clean = image(1, 432);
    let zero = vec![0.0f32; 432];
    for kind in [Regularizer::None, Regularizer::L2, Regularizer::Tv, Regularizer::Ssim] {
        let v = regularizer(&zero, &clean, &clean, shape, kind, 1.0).unwrap();
        if kind == Regularizer::Tv {
            assert!(v > 0.0);
        } else {
            assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
        }
    }
    let eps = 8.0f32 / 255.0;
    let delta = vec![eps; 432];
    let pert: Vec<f32> = clean.iter().map(|x| x + eps).collect();
    let l2 = regularizer(&delta, &clean, &pert, shape, Regularizer::L2, 0.5).unwrap();
    assert_abs_diff_eq!(l2, 0.5 * 432.0 * (eps as f64).powi(2), epsilon = 1e-12);
    let flat = vec![0.4f32; 432];
    assert_eq!(regularizer(&zero, &flat, &flat, shape, Regularizer::Tv, 3.0).unwrap(), 0.0);
    assert_abs_diff_eq!(ssim(&clean, &clean, shape, None), 1.0, epsilon = 1e-12);
}

/// Direct two-dimensional SSIM with an explicit 11x11 window.
fn ssim_oracle(x: &[f32], y: &[f32], h: usize, w: usize) -> f64 {
    let k = 11;
    let mut g = [[0.0f64; 11]; 11];
    let mut s = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = ((i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5);
            *v = (-d2).exp();
            s += *v;
        }
    }
    let mut total = 0.0;
    let mut count = 0.0;
    for oy in 0..=h - k {
        for ox in 0..=w - k {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wgt = g[i][j] / s;
                    let a = x[(oy + i) * w + ox + j] as f64;
                    let b = y[(oy + i) * w + ox + j] as f64;
                    mx += wgt * a;
                    my += wgt * b;
                    xx += wgt * a * a;
                    yy += wgt * b * b;
                    xy += wgt * a * b;
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            count += 1.0;
        }
    }
    total / count
}

#[test]
fn ssim_matches_direct_window_oracle() {
    let (h, w) = (14, 13);
    let x = image(2, h * w);
    let y: Vec<f32> = image(3, h * w).iter().zip(&x).map(|(n, c)| c * 0.7 + n * 0.3).collect();
    assert_abs_diff_eq!(ssim(&x, &y, [1, h, w], None), ssim_oracle(&x, &y, h, w), epsilon = 1e-12);
}

#[test]
fn regularizer_gradients_match_finite_differences() {
    let shape = [2, 12, 12];
    let n = 2 * 2 * 144;
    let clean = image(4, n);
    let delta: Vec<f32> = image(5, n).iter().map(|v| (v - 0.5) * 0.05).collect();
    for kind in [Regularizer::L2, Regularizer::Tv, Regularizer::Ssim] {
        let f = |d: &[f32]| {
            let p: Vec<f32> = clean.iter().zip(d).map(|(c, d)| c + d).collect();
            regularizer(d, &clean, &p, shape, kind, 1.7).unwrap()
        };
        let pert: Vec<f32> = clean.iter().zip(&delta).map(|(c, d)| c + d).collect();
        let (v, grad) = regularizer_gradient(&delta, &clean, &pert, shape, kind, 1.7).unwrap();
        assert_abs_diff_eq!(v, f(&delta), epsilon = 1e-12);
        let h = 2e-3f32;
        for i in (0..n).step_by(37) {
            let mut dp = delta.clone();
            let mut dm = delta.clone();
            dp[i] += h;
            dm[i] -= h;
            let fd = (f(&dp) - f(&dm)) / (2.0 * h as f64);
            let tol = 1e-3 * grad[i].abs().max(1e-2);
            assert!((fd - grad[i]).abs() < tol, "{kind:?} pixel {i}: fd {fd} vs {}", grad[i]);
        }
    }
}

proptest! {
    #[test]
    fn alignment_scale_invariant(
        t in prop::collection::vec(-5.0f64..5.0, 6),
        g in prop::collection::vec(-5.0f64..5.0, 6),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        prop_assume!(norm(&t) > 1e-3 && norm(&g) > 1e-3);
        let base = alignment_loss(&t, &g).unwrap().value;
        let ta: Vec<f64> = t.iter().map(|v| v * a).collect();
        let gb: Vec<f64> = g.iter().map(|v| v * b).collect();
        prop_assert!((alignment_loss(&ta, &gb).unwrap().value - base).abs() < 1e-12);
        prop_assert!((0.0..=2.0).contains(&base));
        let cos = dot(&t, &g) / (norm(&t) * norm(&g));
        prop_assert!((base - (1.0 - cos)).abs() < 1e-15);
    }

    #[test]
    fn rce_increasing_in_true_probability(z in prop::collection::vec(-4.0f64..4.0, 4), bump in 0.01f64..3.0) {
        let mut up = z.clone();
        up[0] += bump;
        prop_assert!(reverse_cross_entropy(&up, 0) > reverse_cross_entropy(&z, 0));
        prop_assert!(reverse_cross_entropy(&z, 0) >= 0.0 && cross_entropy(&z, 0) >= 0.0);
    }

    #[test]
    fn tensorclog_homogeneous(g in prop::collection::vec(-5.0f64..5.0, 5), s in -10.0f64..10.0) {
        let sg: Vec<f64> = g.iter().map(|v| v * s).collect();
        prop_assert!((tensorclog_loss(&sg) - s.abs() * tensorclog_loss(&g)).abs() < 1e-9);
    }

    #[test]
    fn zero_weight_and_none_contribute_nothing(seed in 0u64..100, k in 0usize..4) {
        let kind = [Regularizer::None, Regularizer::L2, Regularizer::Tv, Regularizer::Ssim][k];
        let clean = image(seed, 3 * 64);
        let delta: Vec<f32> = image(seed + 1, 3 * 64).iter().map(|v| v * 0.03).collect();
        let pert: Vec<f32> = clean.iter().zip(&delta).map(|(c, d)| c + d).collect();
        prop_assert_eq!(regularizer(&delta, &clean, &pert, [3, 8, 8], kind, 0.0).unwrap(), 0.0);
        prop_assert_eq!(regularizer(&delta, &clean, &pert, [3, 8, 8], Regularizer::None, 5.0).unwrap(), 0.0);
        prop_assert!(regularizer(&delta, &clean, &pert, [3, 8, 8], kind, 1.0).unwrap() >= 0.0);
    }
}
