//! Config-driven experiment stages with resumable, hash-checked artifacts.
//!
//! A run directory `<out_dir>/<run_id>` holds every artifact plus
//! `manifest.json`, which records a fingerprint of each stage's inputs and the
//! sha256 of each file it wrote. A stage whose inputs are unchanged and whose
//! outputs are intact is skipped unless forced. Timings live only in the
//! manifest so artifact hashes are reproducible.

mod config;
mod manifest;
mod report;

pub use config::{load_splits, DatasetSource, ExperimentConfig, VerifyConfig, DATA_DIR_ENV, SCHEMA_VERSION};
pub use manifest::{file_sha256, RunLock, RunManifest, StageRecord, LOCK_FILE, MANIFEST_FILE};
pub use report::{aggregate, emit_report, mean_se, read_metrics, render_csv, render_markdown, MetricRecord, ReportRow, METRICS_FILE};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::crafting::{craft, CraftMode};
use crate::data::{apply_perturbations, ImageDataset, PerturbationSet};
use crate::error::{Error, IoContext, Result};
use crate::hash::{derive_seed, Fingerprinter};
use crate::nn::ModelCheckpoint;
use crate::objectives::{Objective, ObjectiveKind};
use crate::verify::{verify_crafting_run, OrganicProbing};
use crate::victim::{evaluate_detailed, train_victim, VictimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    TrainSurrogate,
    Craft,
    TrainVictim,
    Evaluate,
    VerifyProp,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::TrainSurrogate,
        Stage::Craft,
        Stage::TrainVictim,
        Stage::Evaluate,
        Stage::VerifyProp,
        Stage::Report,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Stage::TrainSurrogate => "train-surrogate",
            Stage::Craft => "craft",
            Stage::TrainVictim => "train-victim",
            Stage::Evaluate => "evaluate",
            Stage::VerifyProp => "verify-prop",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.id() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown command `{s}`")))
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub force: bool,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub outputs: Vec<PathBuf>,
    /// Human-readable summary for stages that produce one.
    pub summary: Option<String>,
}

/// One trained victim listed in `victims.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VictimEntry {
    pub label: String,
    pub attack: String,
    pub arch: String,
    pub defense: String,
    pub epsilon: f64,
    pub seed: u64,
    /// Run-relative checkpoint base path.
    pub checkpoint: String,
}

const SURROGATE: &str = "surrogate";
const PERTURBATIONS: &str = "perturbations";
const CRAFT_REPORT: &str = "craft_report.json";
const VICTIMS: &str = "victims.json";
const PROPOSITION: &str = "proposition.json";

pub struct Experiment {
    pub config: ExperimentConfig,
    run_dir: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).at(path)?;
    Ok(path.to_path_buf())
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("config serializes")
}

fn require(path: &Path, artifact: &str, stage: Stage) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            artifact: artifact.into(),
            stage: stage.id().into(),
        })
    }
}

fn checkpoint_files(base: &Path) -> Vec<PathBuf> {
    vec![base.with_extension("json"), base.with_extension("f32")]
}

impl Experiment {
    pub fn new(mut config: ExperimentConfig, options: &RunOptions) -> Result<Self> {
        if let Some(seed) = options.seed {
            config.seed = seed;
        }
        if let Some(out) = &options.out {
            config.out_dir = out.clone();
        }
        config.validate()?;
        let run_dir = config.run_dir();
        Ok(Experiment { config, run_dir })
    }

    pub fn from_path(path: impl AsRef<Path>, options: &RunOptions) -> Result<Self> {
        Self::new(ExperimentConfig::load(path)?, options)
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.run_dir.join(rel)
    }

    fn stage_seed(&self, labels: &[&str]) -> u64 {
        derive_seed(self.config.seed, labels)
    }

    fn surrogate_config(&self) -> VictimConfig {
        let mut c = self.config.surrogate.clone();
        c.seed = self.stage_seed(&["train-surrogate", &c.seed.to_string()]);
        c
    }

    fn craft_config(&self) -> crate::crafting::CraftConfig {
        let mut c = self.config.craft.clone();
        c.seed = self.stage_seed(&["craft", &c.seed.to_string()]);
        c
    }

    fn hashes(&self, files: &[PathBuf], f: &mut Fingerprinter) -> Result<()> {
        for p in files {
            f.str(&file_sha256(p)?);
        }
        Ok(())
    }

    /// Run one stage under the run-directory lock.
    pub fn run(&self, stage: Stage, force: bool) -> Result<StageOutcome> {
        let _lock = RunLock::acquire(&self.run_dir)?;
        self.run_unlocked(stage, force)
    }

    /// Run every stage in order.
    pub fn run_all(&self, force: bool) -> Result<Vec<StageOutcome>> {
        let _lock = RunLock::acquire(&self.run_dir)?;
        Stage::ALL.iter().map(|&s| self.run_unlocked(s, force)).collect()
    }

    fn run_unlocked(&self, stage: Stage, force: bool) -> Result<StageOutcome> {
        let config_json = serde_json::to_value(&self.config)?;
        let mut manifest = RunManifest::load(&self.run_dir)?
            .unwrap_or_else(|| RunManifest::new(&self.config.run_id, self.config.fingerprint(), config_json.clone()));
        manifest.config_fingerprint = self.config.fingerprint();
        manifest.config = config_json;

        let (train, val) = load_splits(&self.config.dataset)?;
        let input = self.input_fingerprint(stage, &train, &val)?;
        if !force && manifest.is_current(&self.run_dir, stage.id(), &input) {
            let outputs = manifest.stages[stage.id()].outputs.keys().map(|k| self.path(k)).collect();
            return Ok(StageOutcome {
                stage,
                skipped: true,
                outputs,
                summary: None,
            });
        }
        let start = Instant::now();
        let (outputs, summary) = match stage {
            Stage::TrainSurrogate => self.train_surrogate(&train, &val)?,
            Stage::Craft => self.craft(&train)?,
            Stage::TrainVictim => self.train_victims(&train)?,
            Stage::Evaluate => self.evaluate(&val)?,
            Stage::VerifyProp => self.verify_prop(&train)?,
            Stage::Report => {
                let (rows, files) = emit_report(&self.run_dir)?;
                (files, Some(render_markdown(&rows)))
            }
        };
        manifest.record(&self.run_dir, stage.id(), input, &outputs, start.elapsed().as_secs_f64())?;
        manifest.save(&self.run_dir)?;
        Ok(StageOutcome {
            stage,
            skipped: false,
            outputs,
            summary,
        })
    }

    fn input_fingerprint(&self, stage: Stage, train: &ImageDataset, val: &ImageDataset) -> Result<String> {
        let mut f = Fingerprinter::new();
        f.str(stage.id()).u64(self.config.seed);
        match stage {
            Stage::TrainSurrogate => {
                f.str(&train.fingerprint()).str(&val.fingerprint());
                f.bytes(&json_bytes(&self.config.surrogate));
            }
            Stage::Craft => {
                let base = self.path(SURROGATE);
                require(&base.with_extension("json"), "surrogate", Stage::TrainSurrogate)?;
                self.hashes(&checkpoint_files(&base), &mut f)?;
                f.str(&train.fingerprint()).bytes(&json_bytes(&self.config.craft));
            }
            Stage::TrainVictim => {
                let (payload, meta) = PerturbationSet::sidecar_paths(&self.path(PERTURBATIONS));
                require(&meta, "perturbation", Stage::Craft)?;
                self.hashes(&[payload, meta], &mut f)?;
                f.str(&train.fingerprint())
                    .bytes(&json_bytes(&self.config.victims))
                    .u64(self.config.replicates as u64)
                    .u64(self.config.clean_baseline as u64);
            }
            Stage::Evaluate => {
                let index = self.path(VICTIMS);
                require(&index, "victim", Stage::TrainVictim)?;
                self.hashes(std::slice::from_ref(&index), &mut f)?;
                for v in self.read_victims()? {
                    self.hashes(&checkpoint_files(&self.path(&v.checkpoint)), &mut f)?;
                }
                f.str(&val.fingerprint());
            }
            Stage::VerifyProp => {
                let base = self.path(SURROGATE);
                require(&base.with_extension("json"), "surrogate", Stage::TrainSurrogate)?;
                self.hashes(&checkpoint_files(&base), &mut f)?;
                f.str(&train.fingerprint())
                    .bytes(&json_bytes(&self.config.craft))
                    .bytes(&json_bytes(&self.config.verify));
            }
            Stage::Report => {
                let metrics = self.path(METRICS_FILE);
                require(&metrics, "evaluation", Stage::Evaluate)?;
                self.hashes(&[metrics], &mut f)?;
            }
        }
        Ok(f.finish())
    }

    fn read_victims(&self) -> Result<Vec<VictimEntry>> {
        let path = self.path(VICTIMS);
        Ok(serde_json::from_slice(&fs::read(&path).at(&path)?)?)
    }

    fn train_surrogate(&self, train: &ImageDataset, val: &ImageDataset) -> Result<(Vec<PathBuf>, Option<String>)> {
        let (ckpt, report) = train_victim(train, Some(val), &self.surrogate_config())?;
        let base = self.path(SURROGATE);
        ckpt.save(&base)?;
        let mut outputs = checkpoint_files(&base);
        outputs.push(write_json(&self.path("surrogate_eval.json"), &report)?);
        let summary = report.val_acc.map(|a| format!("surrogate validation accuracy {a:.2}%"));
        Ok((outputs, summary))
    }

    fn craft(&self, train: &ImageDataset) -> Result<(Vec<PathBuf>, Option<String>)> {
        let ckpt = ModelCheckpoint::load(self.path(SURROGATE))?;
        let (set, mut report) = craft(&ckpt, train, &self.craft_config())?;
        report.wall_time_s = None;
        let (payload, meta) = set.save(self.path(PERTURBATIONS))?;
        let rep = write_json(&self.path(CRAFT_REPORT), &report)?;
        let summary = format!(
            "crafted {} perturbations ({}), final objective {:.4}",
            set.len(),
            report.objective,
            report.final_loss
        );
        Ok((vec![payload, meta, rep], Some(summary)))
    }

    fn victim_list(&self) -> Vec<VictimConfig> {
        if self.config.victims.is_empty() {
            vec![self.config.surrogate.clone()]
        } else {
            self.config.victims.clone()
        }
    }

    fn train_victims(&self, train: &ImageDataset) -> Result<(Vec<PathBuf>, Option<String>)> {
        let set = PerturbationSet::load(self.path(PERTURBATIONS))?;
        let poisoned = apply_perturbations(train, &set)?;
        let attack = self.config.craft.objective.kind.id().to_string();
        let mut entries = Vec::new();
        let mut outputs = Vec::new();
        for (i, base_cfg) in self.victim_list().iter().enumerate() {
            for r in 0..self.config.replicates {
                let mut cfg = base_cfg.clone();
                cfg.seed = self.stage_seed(&["train-victim", &i.to_string(), &r.to_string(), &base_cfg.seed.to_string()]);
                let mut runs = vec![(attack.clone(), &poisoned, self.config.craft.epsilon)];
                if self.config.clean_baseline {
                    runs.push(("clean".to_string(), train, 0.0));
                }
                for (name, data, epsilon) in runs {
                    let label = format!("{name}-{}-{}-v{i}-r{r}", cfg.arch, cfg.defense.kind.id());
                    let rel = format!("victims/{label}");
                    let base = self.path(&rel);
                    fs::create_dir_all(self.path("victims")).at(self.path("victims"))?;
                    let (ckpt, _) = train_victim(data, None, &cfg)?;
                    ckpt.save(&base)?;
                    outputs.extend(checkpoint_files(&base));
                    entries.push(VictimEntry {
                        label,
                        attack: name,
                        arch: cfg.arch.id().to_string(),
                        defense: cfg.defense.kind.id().to_string(),
                        epsilon,
                        seed: r as u64,
                        checkpoint: rel,
                    });
                }
            }
        }
        outputs.push(write_json(&self.path(VICTIMS), &entries)?);
        Ok((outputs, Some(format!("trained {} victims", entries.len()))))
    }

    fn evaluate(&self, val: &ImageDataset) -> Result<(Vec<PathBuf>, Option<String>)> {
        let mut lines = String::new();
        let mut summary = String::new();
        for v in self.read_victims()? {
            let ckpt = ModelCheckpoint::load(self.path(&v.checkpoint))?;
            let acc = evaluate_detailed(&ckpt, val)?;
            let rec = MetricRecord {
                run_id: self.config.run_id.clone(),
                label: v.label.clone(),
                attack: v.attack,
                arch: v.arch,
                epsilon: v.epsilon,
                defense: v.defense,
                seed: v.seed,
                val_acc: acc.overall,
                per_class_acc: acc.per_class,
                history: ckpt.history.loss_curve,
            };
            summary.push_str(&format!("{:<48} {:6.2}%\n", v.label, rec.val_acc));
            lines.push_str(&serde_json::to_string(&rec)?);
            lines.push('\n');
        }
        let path = self.path(METRICS_FILE);
        fs::write(&path, lines).at(&path)?;
        Ok((vec![path], Some(summary)))
    }

    fn verify_prop(&self, train: &ImageDataset) -> Result<(Vec<PathBuf>, Option<String>)> {
        let v = &self.config.verify;
        let ckpt = ModelCheckpoint::load(self.path(SURROGATE))?;
        let head: Vec<usize> = (0..v.samples.min(train.len())).collect();
        let subset = train.select(&head)?;
        let mut cfg = self.craft_config();
        cfg.mode = CraftMode::Joint;
        cfg.objective = Objective::new(ObjectiveKind::AlignJoint);
        cfg.steps = v.steps;
        cfg.restarts = v.restarts;
        cfg.split_size = 0;
        let probing = OrganicProbing {
            every: v.every,
            samples: v.probe_samples,
            pixels: v.probe_pixels,
            seed: self.stage_seed(&["verify-prop"]),
            h: v.h,
        };
        let report = verify_crafting_run(&ckpt, &subset, &cfg, &probing)?;
        let path = write_json(&self.path(PROPOSITION), &report)?;
        Ok((vec![path], Some(report.summary_table())))
    }
}

/// Parse `config_path`, apply overrides and run `stage`.
pub fn run_experiment(config_path: impl AsRef<Path>, stage: Stage, options: &RunOptions) -> Result<StageOutcome> {
    Experiment::from_path(config_path, options)?.run(stage, options.force)
}
