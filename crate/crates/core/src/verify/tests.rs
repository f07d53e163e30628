use proptest::prelude::*;

use super::construct::{dominant_target, sign_flip_target, stationary_norm_image};
use super::*;
use crate::crafting::{CraftConfig, CraftMode};
use crate::data::{synthetic_dataset, SplitTag, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{init_model, Architecture, LossKind, Model, ModelSpec};
use crate::objectives::{alignment_loss_detached, alignment_loss_detached_gradient, alignment_loss_gradient, Objective, ObjectiveKind};
use crate::real::norm;

fn pixels(n: usize, salt: u64) -> Vec<f64> {
    (0..n)
        .map(|i| 0.1 + 0.8 * (((i as u64 + 1) * 2654435761 + salt * 97) % 1000) as f64 / 1000.0)
        .collect()
}

/// `f(x) = 3 x0^2 - 2 x0 x1 + 0.5 x1^2 + x0 - 4 x1`.
struct Quadratic;

impl ScalarField for Quadratic {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 0.5 * x[1] * x[1] + x[0] - 4.0 * x[1])
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![6.0 * x[0] - 2.0 * x[1] + 1.0, -2.0 * x[0] + x[1] - 4.0])
    }
}

#[test]
fn quadratic_field_is_exact_up_to_rounding() {
    for x in [[0.3, -1.2], [2.0, 5.0], [-0.7, 0.01]] {
        assert!(finite_diff_check(&Quadratic, &x, 1e-3).unwrap() < 1e-8);
    }
    assert!(finite_diff_check(&Quadratic, &[0.0, 0.0], 0.0).is_err());
}

struct Broken;

impl ScalarField for Broken {
    fn value(&self, _: &[f64]) -> Result<f64> {
        Ok(f64::NAN)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }
}

#[test]
fn non_finite_values_are_errors() {
    assert!(matches!(finite_diff_check(&Broken, &[1.0], 1e-5), Err(Error::NonFinite(_))));
}

fn mlp_setup() -> (crate::nn::ModelCheckpoint, Vec<f64>, Vec<usize>, Vec<f64>) {
    let spec = ModelSpec::new(Architecture::MlpSmall, [1, 4, 4], 3, 21).with_width(8);
    let ckpt = init_model(&spec).unwrap();
    let images = pixels(3 * 16, 1);
    let labels = vec![0, 2, 1];
    let model = Model::<f64>::from_checkpoint(&ckpt).unwrap();
    let target = model.param_gradient(&pixels(2 * 16, 9), &[1, 0], LossKind::ReverseCrossEntropy).unwrap().1.values;
    (ckpt, images, labels, target)
}

#[test]
fn alignment_pixel_gradient_on_mlp_matches_central_differences() {
    let (ckpt, images, labels, target) = mlp_setup();
    assert!(ckpt.params.len() < 5000);
    let objective = CheckObjective::Alignment { target: target.clone() };
    let fine = check_input_gradient(&ckpt, &images, &labels, objective.clone(), 1e-5, Precision::F64).unwrap();
    assert!(fine < 1e-4, "relative error {fine}");
    let coarse = check_input_gradient(&ckpt, &images, &labels, objective.clone(), 1e-2, Precision::F64).unwrap();
    assert!(coarse > fine, "coarse {coarse} fine {fine}");
}

#[test]
fn halving_the_step_never_inflates_error_tenfold() {
    let (ckpt, images, labels, target) = mlp_setup();
    let objective = CheckObjective::Alignment { target };
    let mut h = 1e-3;
    let mut last = check_input_gradient(&ckpt, &images, &labels, objective.clone(), h, Precision::F64).unwrap();
    while h > 2e-6 {
        h /= 2.0;
        let err = check_input_gradient(&ckpt, &images, &labels, objective.clone(), h, Precision::F64).unwrap();
        assert!(err <= 10.0 * last, "h {h}: {err} after {last}");
        last = err;
    }
}

#[test]
fn other_pixel_objectives_match_central_differences() {
    let (ckpt, images, labels, target) = mlp_setup();
    let g = Model::<f64>::from_checkpoint(&ckpt)
        .unwrap()
        .param_gradient(&images, &labels, LossKind::CrossEntropy)
        .unwrap()
        .1;
    for objective in [
        CheckObjective::Loss(LossKind::CrossEntropy),
        CheckObjective::Loss(LossKind::ReverseCrossEntropy),
        CheckObjective::Detached { target, frozen_norm: g.norm() },
        CheckObjective::Tensorclog,
    ] {
        let err = check_input_gradient(&ckpt, &images, &labels, objective.clone(), 1e-5, Precision::F64).unwrap();
        assert!(err < 1e-4, "{objective:?}: {err}");
    }
    // 32-bit evaluation is still close to the coarse differences.
    let err = check_input_gradient(&ckpt, &images, &labels, CheckObjective::Loss(LossKind::CrossEntropy), 1e-2, Precision::F32)
        .unwrap();
    assert!(err < 0.05, "{err}");
}

/// Two parameters, `G(x) = (x0^2 + x1, x0 x1)`, target `T` fixed.
struct QuadraticDetached {
    target: [f64; 2],
    frozen: f64,
}

impl QuadraticDetached {
    fn grad_of(x: &[f64]) -> [f64; 2] {
        [x[0] * x[0] + x[1], x[0] * x[1]]
    }
}

impl ScalarField for QuadraticDetached {
    fn value(&self, x: &[f64]) -> Result<f64> {
        alignment_loss_detached(&self.target, &Self::grad_of(x), self.frozen)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = alignment_loss_detached_gradient(&self.target, self.frozen)?;
        // Chain through dG/dx = [[2 x0, 1], [x1, x0]].
        Ok(vec![d[0] * 2.0 * x[0] + d[1] * x[1], d[0] + d[1] * x[0]])
    }
}

#[test]
fn detached_gradient_on_quadratic_model_matches_symbolic_form() {
    let t = [0.6, -0.8];
    let x = [0.7, -0.3];
    let field = QuadraticDetached { target: t, frozen: 1.7 };
    assert!(finite_diff_check(&field, &x, 1e-5).unwrap() < 1e-8);
    // -<T, dG/dx> / (|T| c)
    let tn = norm(&t);
    let symbolic = [
        -(t[0] * 2.0 * x[0] + t[1] * x[1]) / (tn * 1.7),
        -(t[0] + t[1] * x[0]) / (tn * 1.7),
    ];
    let got = field.gradient(&x).unwrap();
    for (a, b) in got.iter().zip(&symbolic) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn linear_model(seed: u64) -> Model<f64> {
    Model::<f64>::init(&ModelSpec::new(Architecture::Linear, [1, 2, 2], 3, seed)).unwrap()
}

#[test]
fn stationary_norm_gives_vanishing_gamma() {
    let model = linear_model(4);
    let image = pixels(4, 3);
    let fixed = stationary_norm_image(&model, &image, 1, 2, (-30.0, 30.0), 1e-5).unwrap();
    let target = model.param_gradient(&pixels(4, 8), &[2], LossKind::ReverseCrossEntropy).unwrap().1.values;
    let r = proposition_check(&model, &fixed, &[1], &target, 0, 2, 1e-5).unwrap();
    assert!(r.d_norm.abs() < 1e-7, "{r:?}");
    assert!(r.abs_gamma < 1e-6 * r.abs_beta.max(1e-3), "{r:?}");
    assert!(r.inequality_holds && r.signs_match, "{r:?}");
}

#[test]
fn dominant_inner_product_instance_matches_everywhere() {
    let model = linear_model(7);
    let images = pixels(8, 5);
    let labels = [0, 2];
    let pairs = exhaustive_probes(2, [1, 2, 2]).unwrap();
    let (target, margin) = dominant_target(&model, &images, &labels, &pairs, 64, 1, 1e-5).unwrap();
    assert!(margin > 0.0, "margin {margin}");
    let probe = PropositionProbe::new(&model, &images, &labels, &target, 1e-5).unwrap();
    let report = PropositionReport::from_records(verify_state(&probe, &pairs, "dominant").unwrap());
    assert_eq!(report.summary.overall.probed, 8);
    assert_eq!(report.summary.overall.inequality_holds, 8);
    assert_eq!(report.summary.overall.signs_match, 8);
    assert_eq!(report.summary.gamma_bound_failures, 0);
}

#[test]
fn denominator_dominated_instance_is_flagged_and_signs_split() {
    let spec = ModelSpec::new(Architecture::MlpSmall, [1, 4, 4], 3, 5).with_width(8);
    let model = Model::<f64>::init(&spec).unwrap();
    let images = pixels(2 * 16, 4);
    let labels = [1, 0];
    let (sample, pixel) = (1, 6);
    let target = sign_flip_target(&model, &images, &labels, sample, pixel, 1e-5).unwrap();
    let r = proposition_check(&model, &images, &labels, &target, sample, pixel, 1e-5).unwrap();
    assert!(!r.inequality_holds, "{r:?}");
    assert!(!r.signs_match && r.sign_detached == -r.sign_joint, "{r:?}");
    assert!(r.gamma_bound_ok);

    // The analytic second-order path shows the same split.
    let g = model.param_gradient(&images, &labels, LossKind::CrossEntropy).unwrap().1.values;
    let joint = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (a, d) = alignment_loss_gradient(&target, v)?;
        Ok((a.value, d))
    };
    let frozen = norm(&g);
    let detached = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        Ok((alignment_loss_detached(&target, v, frozen)?, alignment_loss_detached_gradient(&target, frozen)?))
    };
    let (_, dj) = model.input_gradient(&images, &labels, LossKind::CrossEntropy, &joint).unwrap();
    let (_, dd) = model.input_gradient(&images, &labels, LossKind::CrossEntropy, &detached).unwrap();
    let at = sample * 16 + pixel;
    assert!(dj[at] * dd[at] < 0.0, "joint {} detached {}", dj[at], dd[at]);
    assert!((dj[at] + (r.beta - r.gamma)).abs() < 1e-6);
    assert!((dd[at] + r.beta).abs() < 1e-6);
}

#[test]
fn target_scale_moves_only_the_raw_inequality() {
    let (ckpt, images, labels, target) = mlp_setup();
    let model = Model::<f64>::from_checkpoint(&ckpt).unwrap();
    let big: Vec<f64> = target.iter().map(|t| t * 1e4).collect();
    let small: Vec<f64> = target.iter().map(|t| t * 1e-4).collect();
    for p in [0, 5, 11] {
        let a = proposition_check(&model, &images, &labels, &target, 1, p, 1e-5).unwrap();
        let b = proposition_check(&model, &images, &labels, &big, 1, p, 1e-5).unwrap();
        let c = proposition_check(&model, &images, &labels, &small, 1, p, 1e-5).unwrap();
        for r in [&b, &c] {
            assert!((r.beta - a.beta).abs() < 1e-6 * a.abs_beta.max(1e-6));
            assert!((r.gamma - a.gamma).abs() < 1e-6 * a.abs_gamma.max(1e-6));
            assert_eq!(r.inequality_holds, a.inequality_holds);
            assert_eq!(r.signs_match, a.signs_match);
        }
        assert!(b.inequality_holds_raw);
        assert!(!c.inequality_holds_raw);
    }
}

#[test]
fn degenerate_inputs_are_errors() {
    let (ckpt, images, labels, target) = mlp_setup();
    let model = Model::<f64>::from_checkpoint(&ckpt).unwrap();
    let zero = vec![0.0; target.len()];
    assert!(matches!(
        proposition_check(&model, &images, &labels, &zero, 0, 0, 1e-5),
        Err(Error::DegenerateGradient(_))
    ));
    assert!(proposition_check(&model, &images, &labels, &target, 0, 0, 0.0).is_err());
    assert!(proposition_check(&model, &images, &labels, &target, 3, 0, 1e-5).is_err());
    assert!(proposition_check(&model, &images, &labels, &target[1..], 0, 0, 1e-5).is_err());
    assert!(exhaustive_probes(2, [3, 8, 8]).is_err());
    assert_eq!(exhaustive_probes(2, [3, 4, 4]).unwrap().len(), 96);
}

#[test]
fn random_probes_are_seeded_and_spread() {
    let a = random_probes(20, 3 * 64, 8, 64, 5);
    assert_eq!(a, random_probes(20, 3 * 64, 8, 64, 5));
    assert_ne!(a, random_probes(20, 3 * 64, 8, 64, 6));
    assert_eq!(a.len(), 64);
    let samples: std::collections::BTreeSet<usize> = a.iter().map(|p| p.0).collect();
    assert_eq!(samples.len(), 8);
    let short = random_probes(2, 4, 8, 64, 1);
    assert_eq!(short.len(), 8);
}

fn record(origin: &str, sample: usize, step: usize, holds: bool, matches: bool) -> PixelRecord {
    PixelRecord {
        origin: origin.into(),
        sample,
        pixel: 0,
        restart: Some(0),
        step: Some(step),
        alpha: 0.5,
        beta: 1.0,
        gamma: 0.1,
        abs_beta: 1.0,
        abs_gamma: 0.1,
        d_norm: 0.1,
        d_inner: 0.2,
        d_inner_raw: 0.2,
        c0: 1.0,
        grad_norm: 1.0,
        phi: Some(1.0),
        inequality_holds: holds,
        inequality_holds_raw: holds,
        sign_detached: 1,
        sign_joint: if matches { 1 } else { -1 },
        signs_match: matches,
        gamma_bound_ok: true,
        joint_residual: 0.0,
    }
}

#[test]
fn report_aggregates_per_step_and_per_trajectory() {
    let report = PropositionReport::from_records(vec![
        record("a", 0, 0, true, true),
        record("a", 0, 1, true, true),
        record("a", 1, 0, true, true),
        record("a", 1, 1, false, false),
        record("b", 2, 0, true, false),
    ]);
    let s = &report.summary;
    assert_eq!(s.overall.probed, 5);
    assert_eq!(s.overall.inequality_holds, 4);
    assert_eq!(s.overall.violations, 1);
    assert_eq!(s.per_origin["a"].violations, 0);
    assert_eq!(s.trajectory.trajectories, 3);
    assert_eq!(s.trajectory.inequality_every_step, 2);
    assert_eq!(s.trajectory.signs_match_every_step, 1);
    assert_eq!(s.final_step.probed, 3);
    assert_eq!(s.final_step.inequality_holds, 2);
    let back: PropositionReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
    let table = report.summary_table();
    assert!(table.contains("violations") && table.contains("trajectories: 3 total"));
}

#[test]
fn organic_states_of_a_crafting_run_obey_the_implication() {
    let spec = ModelSpec::new(Architecture::ConvSmall, [2, 4, 4], 3, 2).with_width(2);
    let ckpt = init_model(&spec).unwrap();
    let ds = synthetic_dataset(
        &SyntheticSpec {
            samples: 6,
            classes: 3,
            shape: [2, 4, 4],
            world_seed: 1,
            sample_seed: 2,
            noise: 0.05,
        },
        SplitTag::Train,
    )
    .unwrap();
    let config = CraftConfig {
        epsilon: 0.1,
        restarts: 2,
        steps: 4,
        batch_size: 6,
        objective: Objective::new(ObjectiveKind::AlignJoint),
        augment: true,
        ..CraftConfig::default()
    };
    let probing = OrganicProbing {
        samples: 3,
        pixels: 6,
        ..OrganicProbing::default()
    };
    let report = verify_crafting_run(&ckpt, &ds, &config, &probing).unwrap();
    let s = &report.summary;
    assert_eq!(s.overall.probed, 2 * 4 * 6);
    assert_eq!(s.overall.violations, 0);
    assert_eq!(s.trajectory.violations, 0);
    assert_eq!(s.gamma_bound_failures, 0);
    assert!(s.max_joint_residual < 1e-6, "{}", s.max_joint_residual);
    assert!(report.records.iter().all(|r| r.step.is_some() && r.restart.is_some()));

    let online = CraftConfig {
        mode: CraftMode::Online,
        objective: Objective::new(ObjectiveKind::AlignDetached),
        ..config
    };
    assert!(verify_crafting_run(&ckpt, &ds, &online, &probing).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn implication_and_gamma_bound_hold_on_random_states(seed in 0u64..1000, salt in 0u64..1000, sample in 0usize..3, pixel in 0usize..16) {
        let spec = ModelSpec::new(Architecture::MlpSmall, [1, 4, 4], 3, seed).with_width(4);
        let model = Model::<f64>::init(&spec).unwrap();
        let images = pixels(48, salt);
        let labels = [(salt % 3) as usize, 1, 2];
        let target = model.param_gradient(&pixels(32, salt + 1), &[0, 2], LossKind::ReverseCrossEntropy).unwrap().1.values;
        let r = proposition_check(&model, &images, &labels, &target, sample, pixel, 1e-5).unwrap();
        prop_assert!(r.gamma_bound_ok);
        prop_assert!(!r.violates(), "{r:?}");
        prop_assert!(r.joint_residual < 1e-6);
    }
}
