use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crafting::CraftConfig;
use crate::data::{load_cifar10_test, load_dataset, synthetic_dataset, DatasetFormat, ImageDataset, SplitTag, SyntheticSpec};
use crate::error::{Error, IoContext, Result};
use crate::hash::{derive_seed, Fingerprinter};
use crate::victim::VictimConfig;

pub const SCHEMA_VERSION: u32 = 1;
/// Directory searched for CIFAR-10 binaries when a config gives no path.
pub const DATA_DIR_ENV: &str = "POISONCRAFT_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Procedural class-conditional images.
    Synthetic {
        train: usize,
        val: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_shape")]
        shape: [usize; 3],
        #[serde(default = "default_noise")]
        noise: f32,
        #[serde(default)]
        world_seed: u64,
    },
    /// CIFAR-10 binary batches, optionally subsampled.
    Cifar10 {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        val_subset: Option<usize>,
    },
    /// `labels.csv` plus PNG files, one directory per split.
    PngDir { train: PathBuf, val: PathBuf },
}

fn default_classes() -> usize {
    10
}

fn default_shape() -> [usize; 3] {
    [3, 32, 32]
}

fn default_noise() -> f32 {
    0.08
}

/// Settings of the `verify-prop` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    /// Leading training samples crafted jointly for probing.
    #[serde(default = "default_verify_samples")]
    pub samples: usize,
    #[serde(default = "default_verify_steps")]
    pub steps: usize,
    #[serde(default = "default_one")]
    pub restarts: usize,
    #[serde(default = "default_one")]
    pub every: usize,
    #[serde(default = "default_probe_samples")]
    pub probe_samples: usize,
    #[serde(default = "default_probe_pixels")]
    pub probe_pixels: usize,
    #[serde(default = "default_h")]
    pub h: f64,
}

fn default_verify_samples() -> usize {
    16
}

fn default_verify_steps() -> usize {
    8
}

fn default_one() -> usize {
    1
}

fn default_probe_samples() -> usize {
    8
}

fn default_probe_pixels() -> usize {
    64
}

fn default_h() -> f64 {
    crate::verify::DEFAULT_STEP
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            samples: default_verify_samples(),
            steps: default_verify_steps(),
            restarts: 1,
            every: 1,
            probe_samples: default_probe_samples(),
            probe_pixels: default_probe_pixels(),
            h: default_h(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub run_id: String,
    /// Global seed; every stage derives its own from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub dataset: DatasetSource,
    pub surrogate: VictimConfig,
    pub craft: CraftConfig,
    /// Victims trained on the released data, for black-box and defense sweeps.
    #[serde(default)]
    pub victims: Vec<VictimConfig>,
    /// Independent training seeds per victim.
    #[serde(default = "default_one")]
    pub replicates: usize,
    /// Also train every victim on the clean data.
    #[serde(default = "default_true")]
    pub clean_baseline: bool,
    #[serde(default)]
    pub verify: VerifyConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
            path: origin.display().to_string(),
            reason: e.to_string(),
        })?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            path: e.path().to_string(),
            reason: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).at(path)?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, reason: String| Err(Error::Config { path: path.into(), reason });
        if self.schema_version != SCHEMA_VERSION {
            return bad(
                "schema_version",
                format!("unsupported schema version {}, expected {SCHEMA_VERSION}", self.schema_version),
            );
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return bad("run_id", format!("`{}` is not a usable directory name", self.run_id));
        }
        if self.replicates == 0 {
            return bad("replicates", "at least one replicate is required".into());
        }
        let wrap = |path: String, r: Result<()>| {
            r.map_err(|e| Error::Config {
                path,
                reason: e.to_string(),
            })
        };
        wrap("surrogate".into(), self.surrogate.validate())?;
        wrap("craft".into(), self.craft.validate())?;
        for (i, v) in self.victims.iter().enumerate() {
            wrap(format!("victims[{i}]"), v.validate())?;
        }
        if self.verify.samples == 0 || self.verify.steps == 0 || !(self.verify.h > 0.0) {
            return bad("verify", "samples, steps and h must be positive".into());
        }
        if let DatasetSource::Synthetic { train, val, .. } = self.dataset {
            if train == 0 || val == 0 {
                return bad("dataset", "synthetic splits must be non-empty".into());
            }
        }
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    pub fn fingerprint(&self) -> String {
        let mut f = Fingerprinter::new();
        f.str("experiment-config").bytes(&serde_json::to_vec(self).expect("config serializes"));
        f.finish()
    }
}

fn cifar_dir(path: &Option<PathBuf>) -> Result<PathBuf> {
    let has = |d: &Path| d.join("data_batch_1.bin").is_file();
    if let Some(p) = path {
        return Ok(p.clone());
    }
    let root = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| Error::Config {
        path: "dataset.path".into(),
        reason: format!("no CIFAR-10 path given and {DATA_DIR_ENV} is unset"),
    })?;
    [root.join("cifar-10-batches-bin"), root.clone()]
        .into_iter()
        .find(|d| has(d))
        .ok_or_else(|| Error::Config {
            path: "dataset.path".into(),
            reason: format!("no CIFAR-10 binaries under {}", root.display()),
        })
}

fn take(ds: ImageDataset, count: Option<usize>, seed: u64) -> Result<ImageDataset> {
    match count {
        Some(k) if k < ds.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, ds.len(), k).into_vec();
            idx.sort_unstable();
            ds.select(&idx)
        }
        _ => Ok(ds),
    }
}

/// Training and validation splits named by a dataset source.
pub fn load_splits(source: &DatasetSource) -> Result<(ImageDataset, ImageDataset)> {
    match source {
        DatasetSource::Synthetic {
            train,
            val,
            classes,
            shape,
            noise,
            world_seed,
        } => {
            let spec = |samples, label: &str| SyntheticSpec {
                samples,
                classes: *classes,
                shape: *shape,
                world_seed: *world_seed,
                sample_seed: derive_seed(*world_seed, &["synthetic", label]),
                noise: *noise,
            };
            Ok((
                synthetic_dataset(&spec(*train, "train"), SplitTag::Train)?,
                synthetic_dataset(&spec(*val, "val"), SplitTag::Val)?,
            ))
        }
        DatasetSource::Cifar10 {
            path,
            train_subset,
            val_subset,
        } => {
            let dir = cifar_dir(path)?;
            let train = load_dataset(&dir, DatasetFormat::Cifar10Binary)?;
            let val = load_cifar10_test(&dir)?;
            Ok((
                take(train, *train_subset, derive_seed(0, &["cifar", "train-subset"]))?,
                take(val, *val_subset, derive_seed(0, &["cifar", "val-subset"]))?,
            ))
        }
        DatasetSource::PngDir { train, val } => Ok((
            load_dataset(train, DatasetFormat::PngDir)?,
            load_dataset(val, DatasetFormat::PngDir)?.with_split(SplitTag::Val),
        )),
    }
}
