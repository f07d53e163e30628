//! Check the sign rule relating the joint and detached alignment gradients:
//! wherever the inner-product term dominates the norm term, both pixel
//! derivatives share a sign. Probes a constructed worst case and the states a
//! real crafting run visits.

use poisoncraft::crafting::CraftConfig;
use poisoncraft::data::{synthetic_dataset, SplitTag, SyntheticSpec};
use poisoncraft::nn::{Architecture, Model, ModelSpec};
use poisoncraft::verify::construct::sign_flip_target;
use poisoncraft::verify::{
    exhaustive_probes, verify_crafting_run, verify_state, OrganicProbing, PropositionProbe, PropositionReport, DEFAULT_STEP,
};
use poisoncraft::victim::{train_victim, VictimConfig};

pub fn run() -> poisoncraft::Result<()> {
    // A target near G where the norm term wins and the signs disagree.
    let model = Model::<f64>::init(&ModelSpec::new(Architecture::MlpSmall, [1, 4, 4], 3, 100).with_width(8))?;
    let images: Vec<f64> = (0..32).map(|i| 0.2 + 0.6 * ((i * 37) % 32) as f64 / 32.0).collect();
    let labels = [1, 0];
    let target = sign_flip_target(&model, &images, &labels, 1, 5, DEFAULT_STEP)?;
    let probe = PropositionProbe::new(&model, &images, &labels, &target, DEFAULT_STEP)?;
    let constructed = PropositionReport::from_records(verify_state(&probe, &exhaustive_probes(2, [1, 4, 4])?, "sign-flip")?);

    let data = synthetic_dataset(
        &SyntheticSpec {
            samples: 24,
            classes: 3,
            shape: [3, 8, 8],
            world_seed: 5,
            sample_seed: 6,
            noise: 0.08,
        },
        SplitTag::Train,
    )?;
    let surrogate_config = VictimConfig {
        width: Some(4),
        batch_size: 8,
        ..VictimConfig::new(Architecture::ConvSmall, 4)
    };
    let (surrogate, _) = train_victim(&data, None, &surrogate_config)?;
    let config = CraftConfig {
        restarts: 2,
        steps: 12,
        batch_size: 24,
        ..CraftConfig::default()
    };
    let probing = OrganicProbing {
        samples: 4,
        pixels: 16,
        seed: 9,
        ..OrganicProbing::default()
    };
    let organic = verify_crafting_run(&surrogate, &data, &config, &probing)?;

    let merged = PropositionReport::merge([constructed, organic]);
    println!("{}", merged.summary_table());
    assert_eq!(merged.summary.overall.violations, 0);
    Ok(())
}

#[allow(dead_code)]
fn main() -> poisoncraft::Result<()> {
    run()
}
