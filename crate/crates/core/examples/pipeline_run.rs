//! Run a whole experiment from a TOML config: surrogate, crafting, release,
//! victims, verification and the aggregated report. Finished stages are
//! skipped on a second run.

use poisoncraft::pipeline::{Experiment, RunOptions};

pub fn run() -> Result<(), Box<dyn std::error::Error>> {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/examples/configs/quick.toml");
    let options = RunOptions {
        out: Some(std::env::temp_dir().join("poisoncraft-examples/runs")),
        ..RunOptions::default()
    };
    let experiment = Experiment::from_path(config, &options)?;
    for outcome in experiment.run_all(true)? {
        println!("{}: {}", outcome.stage, outcome.summary.as_deref().unwrap_or("done"));
    }
    let again = experiment.run_all(false)?;
    assert!(again.iter().all(|o| o.skipped));
    println!("second run skipped all {} stages\n", again.len());
    println!("{}", std::fs::read_to_string(experiment.run_dir().join("report.md"))?);
    Ok(())
}

#[allow(dead_code)]
fn main() -> Result<(), Box<dyn std::error::Error>> {
    run()
}
