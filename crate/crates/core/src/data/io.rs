use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImageDataset, SplitTag};
use crate::error::{Error, IoContext, Result};

/// One label byte followed by a 3x32x32 channel-major image.
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const CIFAR_TRAIN_BATCHES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetFormat {
    Cifar10Binary,
    PngDir,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cifar10-binary" => Ok(DatasetFormat::Cifar10Binary),
            "png-dir" => Ok(DatasetFormat::PngDir),
            other => Err(Error::InvalidArgument(format!("unknown dataset format `{other}`"))),
        }
    }
}

/// Load a training split.
///
/// For `cifar10-binary`, `path` is either one batch file or a directory
/// holding the five `data_batch_*.bin` files. For `png-dir`, `path` holds
/// `labels.csv` (`filename,label`) and the referenced PNG files.
pub fn load_dataset(path: impl AsRef<Path>, format: DatasetFormat) -> Result<ImageDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::from(std::io::ErrorKind::NotFound),
        });
    }
    match format {
        DatasetFormat::Cifar10Binary => {
            let files: Vec<PathBuf> = if path.is_dir() {
                CIFAR_TRAIN_BATCHES.iter().map(|f| path.join(f)).collect()
            } else {
                vec![path.to_path_buf()]
            };
            load_cifar_files(&files, SplitTag::Train)
        }
        DatasetFormat::PngDir => load_png_dir(path),
    }
}

/// The 10000-image `test_batch.bin` from a CIFAR-10 binary directory.
pub fn load_cifar10_test(dir: impl AsRef<Path>) -> Result<ImageDataset> {
    load_cifar_files(&[dir.as_ref().join("test_batch.bin")], SplitTag::Val)
}

fn load_cifar_files(files: &[PathBuf], split: SplitTag) -> Result<ImageDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for file in files {
        let bytes = fs::read(file).at(file)?;
        let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("batch").to_string();
        if bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::Format {
                path: file.clone(),
                record: bytes.len() / CIFAR_RECORD_LEN,
                reason: format!(
                    "truncated record: file length {} is not a multiple of {CIFAR_RECORD_LEN}",
                    bytes.len()
                ),
            });
        }
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD_LEN).enumerate() {
            if rec[0] >= 10 {
                return Err(Error::Format {
                    path: file.clone(),
                    record: r,
                    reason: format!("label byte {} outside [0, 10)", rec[0]),
                });
            }
            labels.push(rec[0] as usize);
            images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
            ids.push(format!("{stem}/{r:05}"));
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset(format!("no records in {}", files[0].display())));
    }
    ImageDataset::new(images, labels, ids, [3, 32, 32], 10, split)
}

#[derive(Deserialize)]
struct LabelRow {
    filename: String,
    label: usize,
}

fn load_png_dir(dir: &Path) -> Result<ImageDataset> {
    let csv_path = dir.join("labels.csv");
    let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| csv_error(&csv_path, 0, e))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let mut shape: Option<[usize; 3]> = None;
    for (r, row) in reader.deserialize::<LabelRow>().enumerate() {
        let row = row.map_err(|e| csv_error(&csv_path, r, e))?;
        let file = dir.join(&row.filename);
        if !file.is_file() {
            return Err(Error::MissingFile {
                file: row.filename,
                referenced_by: csv_path,
            });
        }
        let img = image::open(&file).map_err(|e| Error::Format {
            path: file.clone(),
            record: r,
            reason: e.to_string(),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (c, raw) = match img.color() {
            image::ColorType::L8 | image::ColorType::L16 => (1, img.to_luma8().into_raw()),
            _ => (3, img.to_rgb8().into_raw()),
        };
        let this = [c, h, w];
        match shape {
            None => shape = Some(this),
            Some(s) if s != this => {
                return Err(Error::Format {
                    path: file,
                    record: r,
                    reason: format!("image shape {this:?} differs from {s:?}"),
                })
            }
            _ => {}
        }
        // Interleaved HWC bytes to planar CHW.
        for ch in 0..c {
            images.extend((0..h * w).map(|p| raw[p * c + ch] as f32 / 255.0));
        }
        labels.push(row.label);
        ids.push(row.filename);
    }
    let Some(shape) = shape else {
        return Err(Error::EmptyDataset(format!("{} lists no images", csv_path.display())));
    };
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    ImageDataset::new(images, labels, ids, shape, classes, SplitTag::Train)
}

fn csv_error(path: &Path, record: usize, e: csv::Error) -> Error {
    let record = e.position().map_or(record, |p| p.record() as usize);
    Error::Format {
        path: path.to_path_buf(),
        record,
        reason: e.to_string(),
    }
}

/// Write `dataset` as 8-bit PNGs plus `labels.csv`. Pixel values are rounded
/// to the nearest `k/255`.
pub fn save_png_dir(dataset: &ImageDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).at(dir)?;
    let [c, h, w] = dataset.shape();
    if c != 1 && c != 3 {
        return Err(Error::InvalidArgument(format!("png export needs 1 or 3 channels, got {c}")));
    }
    let csv_path = dir.join("labels.csv");
    let mut out = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, 0, e))?;
    out.write_record(["filename", "label"]).map_err(|e| csv_error(&csv_path, 0, e))?;
    for i in 0..dataset.len() {
        let id = &dataset.ids()[i];
        let name = if id.ends_with(".png") {
            id.clone()
        } else {
            format!("{}.png", id.replace('/', "_"))
        };
        let img = dataset.image(i);
        let mut raw = vec![0u8; c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                raw[p * c + ch] = (img[ch * h * w + p] * 255.0).round() as u8;
            }
        }
        let color = if c == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let file = dir.join(&name);
        image::save_buffer(&file, &raw, w as u32, h as u32, color).map_err(|e| Error::Format {
            path: file.clone(),
            record: i,
            reason: e.to_string(),
        })?;
        out.write_record([name.as_str(), &dataset.labels()[i].to_string()])
            .map_err(|e| csv_error(&csv_path, i, e))?;
    }
    out.flush().at(&csv_path)?;
    Ok(())
}
