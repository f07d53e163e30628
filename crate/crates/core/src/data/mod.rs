//! Datasets, subsets, perturbation sets and their on-disk formats.

mod io;
pub(crate) mod perturbation;
mod synthetic;

pub use io::{load_cifar10_test, load_dataset, save_png_dir, DatasetFormat, CIFAR_RECORD_LEN};
pub use perturbation::{apply_perturbations, PerturbationSet};
pub use synthetic::{synthetic_dataset, SyntheticSpec};

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fingerprinter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
}

/// Images in `[0,1]`, `N x C x H x W`, kept sorted by sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    ids: Vec<String>,
    shape: [usize; 3],
    classes: usize,
    split: SplitTag,
}

impl ImageDataset {
    /// Validate and canonicalize (sort by id) a set of samples.
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        ids: Vec<String>,
        shape: [usize; 3],
        classes: usize,
        split: SplitTag,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyDataset("no samples".into()));
        }
        let per: usize = shape.iter().product();
        if per == 0 || images.len() != n * per || ids.len() != n {
            return Err(Error::ShapeMismatch {
                expected: format!("{n} samples of {shape:?} with {n} ids"),
                actual: format!("{} values, {} ids", images.len(), ids.len()),
            });
        }
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
            return Err(Error::InvalidArgument(format!("label {y} of sample {i} outside [0, {classes})")));
        }
        if let Some(i) = images.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel {} of sample {} outside [0,1]: {}",
                i % per,
                i / per,
                images[i]
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::InvalidArgument(format!("duplicate sample id `{dup}`")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
        let ds = if order.iter().enumerate().all(|(i, &j)| i == j) {
            ImageDataset { images, labels, ids, shape, classes, split }
        } else {
            let mut sorted = Vec::with_capacity(images.len());
            for &j in &order {
                sorted.extend_from_slice(&images[j * per..(j + 1) * per]);
            }
            ImageDataset {
                images: sorted,
                labels: order.iter().map(|&j| labels[j]).collect(),
                ids: order.iter().map(|&j| ids[j].clone()).collect(),
                shape,
                classes,
                split,
            }
        };
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.sample_len();
        &self.images[i * per..(i + 1) * per]
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    /// Same samples with replaced pixels (must stay in `[0,1]`).
    pub fn with_images(&self, images: Vec<f32>) -> Result<Self> {
        ImageDataset::new(
            images,
            self.labels.clone(),
            self.ids.clone(),
            self.shape,
            self.classes,
            self.split,
        )
    }

    /// Samples at the given positions, returned in canonical order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let per = self.sample_len();
        let mut images = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} out of range for {} samples", self.len())));
            }
            images.extend_from_slice(self.image(i));
        }
        ImageDataset::new(
            images,
            indices.iter().map(|&i| self.labels[i]).collect(),
            indices.iter().map(|&i| self.ids[i].clone()).collect(),
            self.shape,
            self.classes,
            self.split,
        )
    }

    /// Content hash over shape, classes, ids, labels and pixels in canonical order.
    pub fn fingerprint(&self) -> String {
        let mut f = Fingerprinter::new();
        f.str("image-dataset");
        for d in self.shape {
            f.u64(d as u64);
        }
        f.u64(self.classes as u64).u64(self.len() as u64);
        for (i, id) in self.ids.iter().enumerate() {
            f.str(id).u64(self.labels[i] as u64);
        }
        f.f32s(&self.images);
        f.finish()
    }
}

/// `floor(fraction * N)` samples drawn uniformly without replacement.
pub fn subset_split(dataset: &ImageDataset, fraction: f64, seed: u64) -> Result<ImageDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("subset fraction {fraction} outside (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(dataset.clone());
    }
    let n = dataset.len();
    let k = subset_size(n, fraction);
    if k == 0 {
        return Err(Error::EmptyDataset(format!("fraction {fraction} of {n} samples selects nothing")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    dataset.select(&idx)
}

/// `floor(fraction * n)`, tolerant of decimal fractions that are not exact in binary.
pub fn subset_size(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64) + 1e-9).floor() as usize
}

#[cfg(test)]
mod tests;
