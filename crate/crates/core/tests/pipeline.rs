use std::fs;
use std::path::Path;
use std::process::Command;

use poisoncraft::data::PerturbationSet;
use poisoncraft::pipeline::{
    aggregate, emit_report, mean_se, render_markdown, Experiment, ExperimentConfig, MetricRecord, RunManifest, RunOptions,
    Stage, LOCK_FILE,
};
use poisoncraft::Error;

fn config_text(run_id: &str, epsilon: &str) -> String {
    format!(
        r#"
schema_version = 1
run_id = "{run_id}"
seed = 3
replicates = 2

[dataset]
source = "synthetic"
train = 12
val = 12
classes = 3
shape = [3, 8, 8]

[surrogate]
arch = "conv-small"
width = 2
epochs = 1
batch_size = 4

[craft]
epsilon = {epsilon}
restarts = 1
steps = 2
batch_size = 12
augment = true

[[victims]]
arch = "mlp-small"
epochs = 1
batch_size = 6

[verify]
samples = 4
steps = 2
probe_samples = 2
probe_pixels = 4
"#
    )
}

fn write_config(dir: &Path, run_id: &str, epsilon: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{run_id}.toml"));
    fs::write(&path, config_text(run_id, epsilon)).unwrap();
    path
}

fn options(dir: &Path) -> RunOptions {
    RunOptions {
        out: Some(dir.join("runs")),
        ..RunOptions::default()
    }
}

fn output_hashes(manifest: &RunManifest) -> Vec<(String, String)> {
    manifest
        .stages
        .values()
        .flat_map(|s| s.outputs.iter().map(|(k, v)| (k.clone(), v.clone())))
        .collect()
}

#[test]
fn zero_epsilon_craft_writes_zero_deltas_listed_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::from_path(write_config(dir.path(), "eps0", "0.0"), &options(dir.path())).unwrap();
    exp.run(Stage::TrainSurrogate, false).unwrap();
    let out = exp.run(Stage::Craft, false).unwrap();
    assert!(!out.skipped);
    let set = PerturbationSet::load(exp.run_dir().join("perturbations")).unwrap();
    assert!(set.deltas.iter().all(|d| *d == 0.0));
    let manifest = RunManifest::load(exp.run_dir()).unwrap().unwrap();
    assert!(manifest.stages["craft"].outputs.contains_key("perturbations.f32"));
    manifest.verify(exp.run_dir()).unwrap();
}

#[test]
fn downstream_stages_name_the_missing_upstream_stage() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::from_path(write_config(dir.path(), "missing", "\"8/255\""), &options(dir.path())).unwrap();
    let err = exp.run(Stage::TrainVictim, false).unwrap_err();
    assert!(err.to_string().contains("missing perturbation artifact; run stage `craft` first"), "{err}");
    let err = exp.run(Stage::Craft, false).unwrap_err();
    assert!(err.to_string().contains("run stage `train-surrogate` first"), "{err}");
    let err = exp.run(Stage::Report, false).unwrap_err();
    assert!(err.to_string().contains("run stage `evaluate` first"), "{err}");
}

#[test]
fn full_pipeline_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    let mut manifests = Vec::new();
    for out in [&first, &second] {
        fs::create_dir_all(out).unwrap();
        let opts = RunOptions {
            out: Some(out.join("runs")),
            ..RunOptions::default()
        };
        let exp = Experiment::from_path(write_config(out, "det", "\"8/255\""), &opts).unwrap();
        let outcomes = exp.run_all(false).unwrap();
        assert!(outcomes.iter().all(|o| !o.skipped));
        let manifest = RunManifest::load(exp.run_dir()).unwrap().unwrap();
        manifest.verify(exp.run_dir()).unwrap();
        assert!(!exp.run_dir().join(LOCK_FILE).exists());
        manifests.push(manifest);

        // Unchanged inputs: every stage is a no-op.
        let again = exp.run_all(false).unwrap();
        assert!(again.iter().all(|o| o.skipped));
        assert_eq!(RunManifest::load(exp.run_dir()).unwrap().unwrap().stages, manifests.last().unwrap().stages);
    }
    assert_eq!(output_hashes(&manifests[0]), output_hashes(&manifests[1]));
    let metrics = fs::read_to_string(first.join("runs/det/metrics.jsonl")).unwrap();
    // 1 victim x 2 replicates x {poisoned, clean}.
    assert_eq!(metrics.lines().count(), 4);
    let report = fs::read_to_string(first.join("runs/det/report.md")).unwrap();
    assert!(report.contains("align-joint") && report.contains("clean") && report.contains("8/255"));
}

#[test]
fn force_tamper_and_seed_override_trigger_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "resume", "\"4/255\"");
    let exp = Experiment::from_path(&cfg, &options(dir.path())).unwrap();
    exp.run(Stage::TrainSurrogate, false).unwrap();
    assert!(exp.run(Stage::TrainSurrogate, false).unwrap().skipped);
    assert!(!exp.run(Stage::TrainSurrogate, true).unwrap().skipped);

    exp.run(Stage::Craft, false).unwrap();
    let payload = exp.run_dir().join("perturbations.f32");
    let mut bytes = fs::read(&payload).unwrap();
    bytes[0] ^= 1;
    fs::write(&payload, bytes).unwrap();
    assert!(RunManifest::load(exp.run_dir()).unwrap().unwrap().verify(exp.run_dir()).is_err());
    assert!(!exp.run(Stage::Craft, false).unwrap().skipped);

    let reseeded = Experiment::from_path(
        &cfg,
        &RunOptions {
            seed: Some(99),
            ..options(dir.path())
        },
    )
    .unwrap();
    assert!(!reseeded.run(Stage::TrainSurrogate, false).unwrap().skipped);
}

#[test]
fn lock_file_blocks_concurrent_orchestration() {
    let dir = tempfile::tempdir().unwrap();
    let exp = Experiment::from_path(write_config(dir.path(), "locked", "0.0"), &options(dir.path())).unwrap();
    fs::create_dir_all(exp.run_dir()).unwrap();
    fs::write(exp.run_dir().join(LOCK_FILE), "1").unwrap();
    assert!(matches!(exp.run(Stage::TrainSurrogate, false), Err(Error::Locked(_))));
}

#[test]
fn schema_violations_report_the_field_path() {
    let origin = Path::new("bad.toml");
    let text = config_text("x", "0.1").replace("restarts = 1", "restarts = \"many\"");
    let err = ExperimentConfig::from_toml(&text, origin).unwrap_err();
    assert!(matches!(&err, Error::Config { path, .. } if path == "craft.restarts"), "{err}");

    let text = config_text("x", "0.1").replace("arch = \"mlp-small\"", "arch = \"vgg-19\"");
    let err = ExperimentConfig::from_toml(&text, origin).unwrap_err();
    assert!(matches!(&err, Error::Config { path, .. } if path.starts_with("victims")), "{err}");

    let text = config_text("x", "0.1").replace("schema_version = 1", "schema_version = 7");
    let err = ExperimentConfig::from_toml(&text, origin).unwrap_err();
    assert!(matches!(&err, Error::Config { path, .. } if path == "schema_version"), "{err}");

    let text = config_text("x", "0.1").replace("seed = 3", "seed = 3\ncolour = \"blue\"");
    assert!(ExperimentConfig::from_toml(&text, origin).is_err());
}

fn metric(attack: &str, epsilon: f64, seed: u64, acc: f64) -> MetricRecord {
    MetricRecord {
        run_id: "r".into(),
        label: format!("{attack}-{seed}"),
        attack: attack.into(),
        arch: "conv-small".into(),
        epsilon,
        defense: "none".into(),
        seed,
        val_acc: acc,
        per_class_acc: vec![],
        history: vec![1.0],
    }
}

#[test]
fn report_uses_mean_and_standard_error() {
    let (m, se) = mean_se(&[40.0, 42.0, 44.0]).unwrap();
    assert!((m - 42.0).abs() < 1e-12);
    assert!((se.unwrap() - 1.1547005383792515).abs() < 1e-12);
    assert_eq!(mean_se(&[7.0]), Some((7.0, None)));
    assert_eq!(mean_se(&[]), None);

    let rows = aggregate(&[
        metric("align-joint", 8.0 / 255.0, 0, 40.0),
        metric("align-joint", 8.0 / 255.0, 1, 42.0),
        metric("align-joint", 8.0 / 255.0, 2, 44.0),
        metric("align-joint", 16.0 / 255.0, 0, 30.0),
    ]);
    assert_eq!(rows.len(), 2);
    let md = render_markdown(&rows);
    assert!(md.contains("| align-joint | 8/255 | conv-small | none | 3 | 42.00 ± 1.15 |"), "{md}");
    assert!(md.contains("| align-joint | 16/255 | conv-small | none | 1 | 30.00 |"), "{md}");

    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("metrics.jsonl"), "").unwrap();
    assert!(emit_report(dir.path()).is_err());
}

#[test]
fn binary_runs_a_stage_and_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cli", "0.0");
    let bin = env!("CARGO_BIN_EXE_poisoncraft");
    let out_dir = dir.path().join("runs");
    let ok = Command::new(bin)
        .args(["train-surrogate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(out_dir.join("cli/manifest.json").is_file());

    let fail = Command::new(bin)
        .args(["train-victim", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(!fail.status.success());
    assert!(String::from_utf8_lossy(&fail.stderr).contains("missing perturbation artifact"));

    let unknown = Command::new(bin).args(["dance", "--config"]).arg(&cfg).output().unwrap();
    assert!(!unknown.status.success());
}
