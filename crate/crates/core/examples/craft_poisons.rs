//! Train a surrogate, craft availability poisons with each objective, and
//! train a fresh victim on every poisoned copy of the training set.
//!
//! Pass `--quick` for a seconds-long smoke run.

use poisoncraft::crafting::{craft, CraftConfig};
use poisoncraft::data::{apply_perturbations, synthetic_dataset, ImageDataset, SplitTag, SyntheticSpec};
use poisoncraft::nn::Architecture;
use poisoncraft::objectives::{Objective, ObjectiveKind};
use poisoncraft::victim::{train_victim, VictimConfig};

fn splits(quick: bool) -> poisoncraft::Result<(ImageDataset, ImageDataset)> {
    let (n, side) = if quick { (40, 8) } else { (1000, 16) };
    let spec = |samples, sample_seed| SyntheticSpec {
        samples,
        classes: 10,
        shape: [3, side, side],
        world_seed: 0,
        sample_seed,
        noise: 0.08,
    };
    Ok((
        synthetic_dataset(&spec(n, 1), SplitTag::Train)?,
        synthetic_dataset(&spec(n / 2, 2), SplitTag::Val)?,
    ))
}

pub fn run(quick: bool) -> poisoncraft::Result<()> {
    let (train, val) = splits(quick)?;
    let epochs = if quick { 1 } else { 40 };
    let victim = |seed| VictimConfig { seed, ..VictimConfig::new(Architecture::ConvSmall, epochs) };

    let (surrogate, report) = train_victim(&train, Some(&val), &victim(100))?;
    println!("surrogate val acc {:.1}%", report.val_acc.unwrap_or(f64::NAN));
    let (_, clean) = train_victim(&train, Some(&val), &victim(0))?;
    println!("clean victim      {:.1}%", clean.val_acc.unwrap_or(f64::NAN));

    for kind in [ObjectiveKind::AlignJoint, ObjectiveKind::Tensorclog, ObjectiveKind::RandomNoise] {
        let config = CraftConfig {
            objective: Objective::new(kind),
            restarts: 1,
            steps: if quick { 4 } else { 100 },
            seed: 11,
            ..CraftConfig::default()
        };
        let (set, craft_report) = craft(&surrogate, &train, &config)?;
        let poisoned = apply_perturbations(&train, &set)?;
        let (_, eval) = train_victim(&poisoned, Some(&val), &victim(0))?;
        println!(
            "{:<13} objective {:.4} -> {:.4}, max |delta| {:.4}, victim {:.1}%",
            kind.id(),
            craft_report.splits[0].clean_loss,
            craft_report.final_loss,
            set.max_abs(),
            eval.val_acc.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> poisoncraft::Result<()> {
    run(std::env::args().any(|a| a == "--quick"))
}
