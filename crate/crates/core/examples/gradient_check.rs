//! Compare analytic pixel gradients of each crafting objective with
//! central finite differences in 64-bit precision.

use poisoncraft::nn::{init_model, Architecture, LossKind, Model, ModelSpec};
use poisoncraft::verify::{check_input_gradient, CheckObjective, Precision, DEFAULT_STEP};

fn pixels(n: usize, salt: u64) -> Vec<f64> {
    (0..n).map(|i| 0.1 + 0.8 * (((i as u64 + 1) * 2654435761 + salt * 97) % 1000) as f64 / 1000.0).collect()
}

pub fn run() -> poisoncraft::Result<()> {
    let spec = ModelSpec::new(Architecture::MlpSmall, [3, 4, 4], 10, 3).with_width(16);
    let ckpt = init_model(&spec)?;
    let model = Model::<f64>::from_checkpoint(&ckpt)?;
    let target = model.param_gradient(&pixels(4 * 48, 9), &[0, 1, 2, 3], LossKind::ReverseCrossEntropy)?.1.values;
    let images = pixels(3 * 48, 1);
    let labels = [4, 7, 1];
    let frozen = model.param_gradient(&images, &labels, LossKind::CrossEntropy)?.1.norm();

    println!("{} parameters", ckpt.params.len());
    let objectives = [
        ("cross-entropy", CheckObjective::Loss(LossKind::CrossEntropy)),
        ("alignment", CheckObjective::Alignment { target: target.clone() }),
        ("detached alignment", CheckObjective::Detached { target, frozen_norm: frozen }),
        ("tensorclog", CheckObjective::Tensorclog),
    ];
    for (name, objective) in objectives {
        let err = check_input_gradient(&ckpt, &images, &labels, objective, DEFAULT_STEP, Precision::F64)?;
        println!("{name:<20} max relative error {err:.2e}");
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> poisoncraft::Result<()> {
    run()
}
