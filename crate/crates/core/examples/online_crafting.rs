//! Online crafting: each sample is perturbed on its own against a target
//! gradient from a small subset, so new samples can be poisoned as they arrive
//! without revisiting the rest of the dataset.
//!
//! Pass `--quick` for a seconds-long smoke run.

use poisoncraft::crafting::{compute_target_gradient, craft_online, CraftConfig, CraftMode, TargetSource};
use poisoncraft::data::{subset_split, synthetic_dataset, SplitTag, SyntheticSpec};
use poisoncraft::nn::{Architecture, Model};
use poisoncraft::objectives::{Objective, ObjectiveKind};
use poisoncraft::victim::{train_victim, VictimConfig};

pub fn run(quick: bool) -> poisoncraft::Result<()> {
    let (n, side) = if quick { (40, 8) } else { (600, 16) };
    let spec = SyntheticSpec {
        samples: n,
        classes: 10,
        shape: [3, side, side],
        world_seed: 0,
        sample_seed: 1,
        noise: 0.08,
    };
    let train = synthetic_dataset(&spec, SplitTag::Train)?;

    // The attacker only ever sees a tenth of the data.
    let seen = subset_split(&train, 0.1, 77)?;
    let (surrogate, _) = train_victim(&seen, None, &VictimConfig::new(Architecture::ConvSmall, if quick { 1 } else { 40 }))?;
    let model = Model::<f32>::from_checkpoint(&surrogate)?;
    let source = TargetSource::Subset { fraction: 1.0, seed: None };
    let target = compute_target_gradient(&model, &seen, &source, 0, 128)?;
    println!("target gradient from {} samples, norm {:.4}", target.samples, target.norm());

    let config = CraftConfig {
        objective: Objective::new(ObjectiveKind::AlignDetached),
        mode: CraftMode::Online,
        restarts: 2,
        steps: if quick { 4 } else { 60 },
        ..CraftConfig::default()
    };
    let arriving = train.select(&[0, 1, 2, 3])?;
    let (deltas, report) = craft_online(&surrogate, &arriving, &target, &config)?;
    println!(
        "{} new samples: objective {:.4} -> {:.4}, restart picks {:?}",
        report.samples, report.clean_loss, report.final_loss, report.selected_counts
    );

    // Crafting a sample alone gives the same perturbation as in a batch.
    let (alone, _) = craft_online(&surrogate, &train.select(&[2])?, &target, &config)?;
    let per = train.sample_len();
    assert_eq!(&deltas[2 * per..3 * per], &alone[..]);
    println!("sample 2 crafted alone matches its batched perturbation");
    Ok(())
}

#[allow(dead_code)]
fn main() -> poisoncraft::Result<()> {
    run(std::env::args().any(|a| a == "--quick"))
}
