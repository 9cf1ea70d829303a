//! Seeded desk-scale datasets: Gaussian blobs and IDX image archives.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Feature matrix `[num_examples, feature_dim]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "features {:?} do not match {} labels",
                features.shape(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if !features.is_finite() {
            return Err(Error::InvalidArgument("features contain NaN or Inf".into()));
        }
        Ok(LabeledDataset {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Example indices grouped by class.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        by_class
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<LabeledDataset> {
        let features = self.features.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(LabeledDataset {
            features,
            labels,
            num_classes: self.num_classes,
            split,
        })
    }
}

fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidArgument(format!("{name} must be positive")));
    }
    Ok(())
}

fn unit_means(num_classes: usize, feature_dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng::stream(seed, "blobs/means");
    (0..num_classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..feature_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// Gaussian blobs: class means on the unit sphere, isotropic noise of standard
/// deviation `spread`. Examples are laid out class by class.
pub fn gen_blobs(
    num_classes: usize,
    per_class: usize,
    feature_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    check_positive("num_classes", num_classes)?;
    check_positive("per_class", per_class)?;
    check_positive("feature_dim", feature_dim)?;
    if !(spread > 0.0) {
        return Err(Error::InvalidArgument(format!("spread must be > 0, got {spread}")));
    }
    let means = unit_means(num_classes, feature_dim, seed);
    let mut rng = rng::stream(seed, "blobs/samples");
    let mut data = Vec::with_capacity(num_classes * per_class * feature_dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + spread * z);
            }
            labels.push(class);
        }
    }
    let features = Tensor::matrix(labels.len(), feature_dim, data)?;
    LabeledDataset::new(features, labels, num_classes, Split::Train)
}

/// Blobs drawn once and divided per class into `train_per_class` training and
/// `val_per_class` validation examples.
pub fn gen_blobs_train_val(
    num_classes: usize,
    train_per_class: usize,
    val_per_class: usize,
    feature_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    check_positive("val_per_class", val_per_class)?;
    let per_class = train_per_class + val_per_class;
    let all = gen_blobs(num_classes, per_class, feature_dim, spread, seed)?;
    let (mut train_idx, mut val_idx) = (Vec::new(), Vec::new());
    for c in 0..num_classes {
        let base = c * per_class;
        train_idx.extend(base..base + train_per_class);
        val_idx.extend(base + train_per_class..base + per_class);
    }
    Ok((all.subset(&train_idx, Split::Train)?, all.subset(&val_idx, Split::Val)?))
}

/// Seeded random partition into `(train, val)`; `train` receives
/// `round(len * train_fraction)` examples.
pub fn split(
    dataset: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let cut = (dataset.len() as f64 * train_fraction).round() as usize;
    let (train, val) = order.split_at(cut);
    Ok((
        dataset.subset(train, Split::Train)?,
        dataset.subset(val, Split::Val)?,
    ))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses IDX image bytes into `(count, rows * cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad magic 0x{magic:08x} for IDX images (expected 0x{IDX_IMAGES_MAGIC:08x})"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let expected = 16 + count * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok((count, rows * cols, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad magic 0x{magic:08x} for IDX labels (expected 0x{IDX_LABELS_MAGIC:08x})"
        )));
    }
    let count = be_u32(bytes, 4)? as usize;
    let expected = 8 + count;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Loads an IDX image/label pair. Pixels are scaled to `[0, 1]`; with
/// `standardize` each feature is then shifted to zero mean and unit variance
/// (constant features are only centered).
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    standardize: bool,
) -> Result<LabeledDataset> {
    let (count, dim, pixels) = parse_idx_images(&read_file(images_path.as_ref())?)?;
    let raw_labels = parse_idx_labels(&read_file(labels_path.as_ref())?)?;
    if raw_labels.len() != count {
        return Err(Error::Format(format!(
            "image file holds {count} images but label file holds {} labels",
            raw_labels.len()
        )));
    }
    let mut features = Tensor::matrix(count, dim, pixels.iter().map(|&p| f64::from(p) / 255.0).collect())?;
    if standardize && count > 0 {
        standardize_columns(&mut features);
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(2);
    LabeledDataset::new(features, labels, num_classes, Split::Train)
}

fn standardize_columns(features: &mut Tensor) {
    let (n, d) = (features.rows(), features.cols());
    let data = features.data_mut();
    for j in 0..d {
        let mean = (0..n).map(|i| data[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (data[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for i in 0..n {
            data[i * d + j] = (data[i * d + j] - mean) * scale;
        }
    }
}

/// Encodes images (`count` images of `rows x cols` bytes) in IDX format.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Idx,
}

/// Which data to load and how to split it. Blob fields are ignored for IDX
/// data and vice versa.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub spread: f64,
    pub seed: u64,
    pub images: Option<std::path::PathBuf>,
    pub labels: Option<std::path::PathBuf>,
    /// Share of the IDX examples kept for training; the rest validates.
    pub train_fraction: f64,
    pub standardize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Blobs,
            classes: 4,
            dim: 16,
            train_per_class: 500,
            val_per_class: 250,
            spread: 0.6,
            seed: 0,
            images: None,
            labels: None,
            train_fraction: 0.8,
            standardize: true,
        }
    }
}

impl DatasetConfig {
    /// `(train, val)` as configured.
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self.kind {
            DatasetKind::Blobs => gen_blobs_train_val(
                self.classes,
                self.train_per_class,
                self.val_per_class,
                self.dim,
                self.spread,
                self.seed,
            ),
            DatasetKind::Idx => {
                let (Some(images), Some(labels)) = (&self.images, &self.labels) else {
                    return Err(Error::InvalidArgument("IDX data needs both an images and a labels path".into()));
                };
                let all = load_idx(images, labels, self.standardize)?;
                split(&all, self.train_fraction, self.seed)
            }
        }
    }
}
