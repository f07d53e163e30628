//! Perceptual penalties on a perturbation, and crafting with one attached.

use poisoncraft::crafting::{craft, CraftConfig};
use poisoncraft::data::{synthetic_dataset, SplitTag, SyntheticSpec};
use poisoncraft::nn::{init_model, Architecture, ModelSpec};
use poisoncraft::objectives::{regularizer, ssim, tv, Objective, ObjectiveKind, Regularizer};

pub fn run() -> poisoncraft::Result<()> {
    let spec = SyntheticSpec {
        samples: 8,
        classes: 4,
        shape: [3, 16, 16],
        world_seed: 0,
        sample_seed: 1,
        noise: 0.08,
    };
    let data = synthetic_dataset(&spec, SplitTag::Train)?;
    let shape = data.shape();
    let clean = data.images();
    let eps = 8.0f32 / 255.0;

    // Checkerboard noise: the worst case for TV at a fixed l-infinity budget.
    let delta: Vec<f32> = (0..clean.len()).map(|i| if (i + i / shape[2]) % 2 == 0 { eps } else { -eps }).collect();
    let perturbed: Vec<f32> = clean.iter().zip(&delta).map(|(x, d)| (x + d).clamp(0.0, 1.0)).collect();
    let per = data.sample_len();
    println!(
        "sample 0: tv {:.2} -> {:.2}, ssim {:.4}",
        tv(&clean[..per], shape, None),
        tv(&perturbed[..per], shape, None),
        ssim(&clean[..per], &perturbed[..per], shape, None)
    );
    for kind in [Regularizer::L2, Regularizer::Tv, Regularizer::Ssim] {
        let penalty = regularizer(&delta, clean, &perturbed, shape, kind, 1.0)? - regularizer(&vec![0.0; delta.len()], clean, clean, shape, kind, 1.0)?;
        println!("{kind:?} penalty added by the checkerboard: {penalty:.4}");
    }

    let surrogate = init_model(&ModelSpec::new(Architecture::ConvSmall, shape, 4, 0).with_width(4))?;
    for (kind, weight) in [(Regularizer::None, 0.0), (Regularizer::Tv, 1e-2)] {
        let config = CraftConfig {
            objective: Objective::new(ObjectiveKind::AlignJoint).with_regularizer(kind, weight),
            restarts: 1,
            steps: 10,
            ..CraftConfig::default()
        };
        let (set, _) = craft(&surrogate, &data, &config)?;
        let crafted: Vec<f32> = clean.iter().zip(&set.deltas).map(|(x, d)| x + d).collect();
        println!("crafted with {kind:?}: total tv {:.2}", regularizer(&set.deltas, clean, &crafted, shape, Regularizer::Tv, 1.0)?);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> poisoncraft::Result<()> {
    run()
}
