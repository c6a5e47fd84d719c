//! Image datasets: the IDX container used by MNIST and synthetic Gaussian blobs.
//!
//! Ground-truth labels are kept in `eval_labels` and are only read by
//! evaluation code; training takes labels exclusively from a
//! [`LabelStore`](crate::annotation::LabelStore).

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numerics::Matrix;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Classes assumed when no label file is given.
pub const DEFAULT_CLASSES: usize = 10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: bad magic number 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("{what}: expected {expected} bytes, found {actual}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("image file holds {images} samples but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("pixel {value} at sample {sample}, component {index} is outside [0, 1]")]
    PixelRange { sample: usize, index: usize, value: f64 },
    #[error("evaluation label {label} at sample {sample} is not below the class count {classes}")]
    LabelRange {
        sample: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Matrix,
    eval_labels: Option<Vec<usize>>,
    classes: usize,
    image_rows: usize,
    image_cols: usize,
}

impl Dataset {
    /// Validates pixel range and label range.
    pub fn new(
        images: Matrix,
        eval_labels: Option<Vec<usize>>,
        classes: usize,
        image_rows: usize,
        image_cols: usize,
    ) -> Result<Self> {
        if image_rows * image_cols != images.cols() {
            return Err(DatasetError::InvalidArgument(format!(
                "image sides {image_rows}x{image_cols} do not match dimension {}",
                images.cols()
            )));
        }
        if classes == 0 {
            return Err(DatasetError::InvalidArgument("class count must be at least 1".into()));
        }
        for sample in 0..images.rows() {
            if let Some((index, &value)) = images
                .row(sample)
                .iter()
                .enumerate()
                .find(|(_, v)| !(0.0..=1.0).contains(*v))
            {
                return Err(DatasetError::PixelRange { sample, index, value });
            }
        }
        if let Some(labels) = &eval_labels {
            if labels.len() != images.rows() {
                return Err(DatasetError::CountMismatch {
                    images: images.rows(),
                    labels: labels.len(),
                });
            }
            if let Some((sample, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
                return Err(DatasetError::LabelRange { sample, label, classes });
            }
        }
        Ok(Self {
            images,
            eval_labels,
            classes,
            image_rows,
            image_cols,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.images.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_rows(&self) -> usize {
        self.image_rows
    }

    pub fn image_cols(&self) -> usize {
        self.image_cols
    }

    pub fn images(&self) -> &Matrix {
        &self.images
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    /// Held-out ground truth. Never used for training.
    pub fn eval_labels(&self) -> Option<&[usize]> {
        self.eval_labels.as_deref()
    }

    /// Overrides the class count; fails if an evaluation label would fall outside it.
    pub fn with_classes(mut self, classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(DatasetError::InvalidArgument("class count must be at least 1".into()));
        }
        if let Some(labels) = &self.eval_labels {
            if let Some((sample, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
                return Err(DatasetError::LabelRange { sample, label, classes });
            }
        }
        self.classes = classes;
        Ok(self)
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_rows(indices),
            eval_labels: self
                .eval_labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            classes: self.classes,
            image_rows: self.image_rows,
            image_cols: self.image_cols,
        }
    }

    /// The first `limit` samples.
    pub fn truncated(&self, limit: usize) -> Dataset {
        let n = limit.min(self.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Pixels re-quantised to bytes, `round(x · 255)`.
    pub fn pixel_bytes(&self, i: usize) -> Vec<u8> {
        self.sample(i)
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Serialises the images as an IDX3 image file.
    pub fn to_idx_images(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * self.dim());
        out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        out.extend_from_slice(&(self.len() as u32).to_be_bytes());
        out.extend_from_slice(&(self.image_rows as u32).to_be_bytes());
        out.extend_from_slice(&(self.image_cols as u32).to_be_bytes());
        for i in 0..self.len() {
            out.extend(self.pixel_bytes(i));
        }
        out
    }

    /// Serialises the evaluation labels as an IDX1 label file.
    pub fn to_idx_labels(&self) -> Option<Vec<u8>> {
        let labels = self.eval_labels.as_ref()?;
        let mut out = Vec::with_capacity(8 + labels.len());
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend(labels.iter().map(|&l| l as u8));
        Some(out)
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4-byte slice"))
}

fn require_len(what: &'static str, bytes: &[u8], expected: usize) -> Result<()> {
    if bytes.len() != expected {
        return Err(DatasetError::Length {
            what,
            expected,
            actual: bytes.len(),
        });
    }
    Ok(())
}

/// Parsed IDX3 image file: count, rows, cols and the raw pixel bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    const WHAT: &str = "image file";
    if bytes.len() < 16 {
        return Err(DatasetError::Length {
            what: WHAT,
            expected: 16,
            actual: bytes.len(),
        });
    }
    let magic = read_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::BadMagic {
            what: WHAT,
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let (count, rows, cols) = (
        read_u32(bytes, 4) as usize,
        read_u32(bytes, 8) as usize,
        read_u32(bytes, 12) as usize,
    );
    let payload = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| DatasetError::InvalidArgument("image header dimensions overflow".into()))?;
    require_len(WHAT, bytes, payload)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    const WHAT: &str = "label file";
    if bytes.len() < 8 {
        return Err(DatasetError::Length {
            what: WHAT,
            expected: 8,
            actual: bytes.len(),
        });
    }
    let magic = read_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(DatasetError::BadMagic {
            what: WHAT,
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = read_u32(bytes, 4) as usize;
    require_len(WHAT, bytes, 8 + count)?;
    Ok(bytes[8..].to_vec())
}

/// Builds a dataset from raw IDX bytes. Pixels are scaled by `1/255`.
///
/// The class count is `max(label) + 1` when labels are present, otherwise
/// [`DEFAULT_CLASSES`].
pub fn dataset_from_idx(images: &[u8], labels: Option<&[u8]>) -> Result<Dataset> {
    let parsed = parse_idx_images(images)?;
    let labels = labels.map(parse_idx_labels).transpose()?;
    if let Some(l) = &labels {
        if l.len() != parsed.count {
            return Err(DatasetError::CountMismatch {
                images: parsed.count,
                labels: l.len(),
            });
        }
    }
    let dim = parsed.rows * parsed.cols;
    let data = parsed.pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let eval_labels: Option<Vec<usize>> = labels.map(|l| l.into_iter().map(usize::from).collect());
    let classes = eval_labels
        .as_ref()
        .and_then(|l| l.iter().max().map(|m| m + 1))
        .unwrap_or(DEFAULT_CLASSES);
    Dataset::new(
        Matrix::from_vec(parsed.count, dim, data),
        eval_labels,
        classes,
        parsed.rows,
        parsed.cols,
    )
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let images = read_file(images_path)?;
    let labels = labels_path.map(read_file).transpose()?;
    dataset_from_idx(&images, labels.as_deref())
}

const CENTER_SEED: u64 = 0x0B10_B5EE_D000_0001;

/// Distinct blob centers on a coarse grid of `[0, 1]^dim`.
///
/// Depends only on `(classes, dim)`, so draws with different seeds share centers.
pub fn blob_centers(classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut levels = 2usize;
    while (levels as f64).powi(dim as i32) < classes as f64 {
        levels += 1;
    }
    let step = 1.0 / (levels - 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(CENTER_SEED ^ ((classes as u64) << 32) ^ dim as u64);
    let mut min_separation = (dim / 4).max(1);
    let mut centers: Vec<Vec<usize>> = Vec::with_capacity(classes);
    let mut failures = 0;
    while centers.len() < classes {
        let candidate: Vec<usize> = (0..dim).map(|_| rng.random_range(0..levels)).collect();
        let far_enough = centers
            .iter()
            .all(|c| c.iter().zip(&candidate).map(|(a, b)| a.abs_diff(*b)).sum::<usize>() >= min_separation);
        if far_enough {
            centers.push(candidate);
            failures = 0;
        } else {
            failures += 1;
            if failures > 1000 && min_separation > 1 {
                min_separation /= 2;
                failures = 0;
            }
        }
    }
    centers
        .into_iter()
        .map(|c| c.into_iter().map(|l| l as f64 * step).collect())
        .collect()
}

/// `classes` Gaussian blobs of `per_class` samples each, clipped to `[0, 1]`.
///
/// Samples are stored class by class; `eval_labels` holds the blob index.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(DatasetError::InvalidArgument(
            "blob count, samples per blob and dimension must all be at least 1".into(),
        ));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(DatasetError::InvalidArgument(format!(
            "spread must be finite and >= 0, got {spread}"
        )));
    }
    let centers = blob_centers(classes, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            for &c in center {
                let noise: f64 = rng.sample(StandardNormal);
                data.push((c + spread * noise).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    let side = (dim as f64).sqrt().round() as usize;
    let (rows, cols) = if side * side == dim { (side, side) } else { (1, dim) };
    Dataset::new(Matrix::from_vec(n, dim, data), Some(labels), classes, rows, cols)
}

/// Seeded shuffle of `0..n` cut at `round(n · fraction)`; each part is returned sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DatasetError::InvalidArgument(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (n as f64 * fraction).round() as usize;
    let mut first = order[..cut].to_vec();
    let mut second = order[cut..].to_vec();
    first.sort_unstable();
    second.sort_unstable();
    Ok((first, second))
}

pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(dataset.len(), fraction, seed)?;
    Ok((dataset.subset(&a), dataset.subset(&b)))
}
