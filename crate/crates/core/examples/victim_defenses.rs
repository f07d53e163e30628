//! Train victims on a poisoned set under each training-time defense.
//!
//! Pass `--quick` for a seconds-long smoke run.

use poisoncraft::crafting::{craft, CraftConfig};
use poisoncraft::data::{apply_perturbations, synthetic_dataset, SplitTag, SyntheticSpec};
use poisoncraft::nn::Architecture;
use poisoncraft::victim::{train_victim, DefenseConfig, DefenseKind, VictimConfig};

pub fn run(quick: bool) -> poisoncraft::Result<()> {
    let (n, side, epochs) = if quick { (40, 8, 1) } else { (1000, 16, 40) };
    let spec = |samples, sample_seed| SyntheticSpec {
        samples,
        classes: 10,
        shape: [3, side, side],
        world_seed: 0,
        sample_seed,
        noise: 0.08,
    };
    let train = synthetic_dataset(&spec(n, 1), SplitTag::Train)?;
    let val = synthetic_dataset(&spec(n / 2, 2), SplitTag::Val)?;

    let base = VictimConfig::new(Architecture::ConvSmall, epochs);
    let (surrogate, _) = train_victim(&train, None, &VictimConfig { seed: 100, ..base.clone() })?;
    let config = CraftConfig {
        restarts: 1,
        steps: if quick { 4 } else { 100 },
        ..CraftConfig::default()
    };
    let (set, _) = craft(&surrogate, &train, &config)?;
    let poisoned = apply_perturbations(&train, &set)?;

    for kind in [DefenseKind::None, DefenseKind::Dpsgd, DefenseKind::GaussianSmooth, DefenseKind::RandomLinfNoise] {
        let victim = VictimConfig { defense: DefenseConfig::of(kind), ..base.clone() };
        let (_, eval) = train_victim(&poisoned, Some(&val), &victim)?;
        println!("{:<18} {:.1}%", kind.id(), eval.val_acc.unwrap_or(f64::NAN));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> poisoncraft::Result<()> {
    run(std::env::args().any(|a| a == "--quick"))
}
