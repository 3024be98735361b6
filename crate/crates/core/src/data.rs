//! Labeled datasets: synthetic Gaussian mixtures, IDX files and CSV files.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Input(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// SHA-256 over shape, class count, feature bits and labels, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.num_classes as u64).to_le_bytes());
        for v in self.features.as_slice() {
            h.update(v.to_bits().to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

impl Split {
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.train.fingerprint());
        h.update(self.test.fingerprint());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Splits each class separately: the first `⌊fraction·n_c⌋` samples of a
/// seeded permutation of class `c` go to the training side.
pub fn stratified_split(data: &Dataset, train_fraction: f64, seed: u64) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must be in (0, 1), got {train_fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 0..data.num_classes {
        let mut members: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == class).collect();
        members.shuffle(&mut rng);
        let cut = (train_fraction * members.len() as f64).floor() as usize;
        train.extend_from_slice(&members[..cut]);
        test.extend_from_slice(&members[cut..]);
    }
    Ok(Split {
        train: data.subset(&train),
        test: data.subset(&test),
    })
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSpec {
    SyntheticGaussians(GaussianSpec),
    IdxFiles {
        images: PathBuf,
        labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
    },
    CsvFile {
        path: PathBuf,
        label_column: String,
        test_path: Option<PathBuf>,
    },
}

/// Isotropic Gaussian clusters around class means on a sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub classes: usize,
    pub dim: usize,
    /// Samples per class before the 80/20 split.
    pub per_class: usize,
    pub radius: f64,
    pub std: f64,
    pub seed: u64,
}

impl GaussianSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 1 || self.per_class < 2 || !(self.std > 0.0) || !(self.radius > 0.0) {
            return Err(Error::Config(format!("invalid Gaussian mixture spec: {self:?}")));
        }
        Ok(())
    }
}

/// Fraction of each class assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub split: Split,
    pub means: Vec<Vec<f64>>,
}

pub fn gen_gaussian_mixture(spec: &GaussianSpec) -> Result<GaussianMixture> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| spec.radius * x / norm).collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.std).map_err(|e| Error::Config(e.to_string()))?;
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            data.extend(mean.iter().map(|m| m + noise.sample(&mut rng)));
            labels.push(class);
        }
    }
    let all = Dataset::new(Matrix::from_vec(n, spec.dim, data)?, labels, spec.classes)?;
    let split = stratified_split(&all, TRAIN_FRACTION, spec.seed.wrapping_add(1))?;
    Ok(GaussianMixture { split, means })
}

/// Index of the nearest class mean (Euclidean), lowest index on ties.
pub fn nearest_mean(x: &[f64], means: &[Vec<f64>]) -> usize {
    let dist = |m: &Vec<f64>| x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let mut best = 0;
    let mut best_d = dist(&means[0]);
    for (i, m) in means.iter().enumerate().skip(1) {
        let d = dist(m);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, offset as u64, "truncated header"))
}

/// Parses an IDX header; returns the dimensions and the payload offset.
fn idx_header(bytes: &[u8], magic: u32, path: &Path) -> Result<(Vec<usize>, usize)> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(format_err(path, 0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let expected = dims.iter().product::<usize>();
    if bytes.len() - start < expected {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("truncated payload: {} bytes, expected {expected}", bytes.len() - start),
        ));
    }
    Ok((dims, start))
}

/// Reads an IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;
    let (img_dims, img_start) = idx_header(&img, IDX_IMAGES_MAGIC, images)?;
    let (lab_dims, lab_start) = idx_header(&lab, IDX_LABELS_MAGIC, labels)?;
    let n = img_dims[0];
    if lab_dims[0] != n {
        return Err(format_err(
            labels,
            4,
            format!("label count {} differs from image count {n}", lab_dims[0]),
        ));
    }
    let pixels = img_dims[1] * img_dims[2];
    let data = img[img_start..img_start + n * pixels]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let ys: Vec<usize> = lab[lab_start..lab_start + n].iter().map(|&b| usize::from(b)).collect();
    let k = ys.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(Matrix::from_vec(n, pixels, data)?, ys, k)
}

/// Writes an IDX image/label pair. Pixels are rounded from `[0, 1]` to bytes.
pub fn write_idx(data: &Dataset, rows: usize, cols: usize, images: &Path, labels: &Path) -> Result<()> {
    if rows * cols != data.dim() {
        return Err(Error::Config(format!("{rows}x{cols} images do not match dimension {}", data.dim())));
    }
    if data.num_classes > 256 {
        return Err(Error::Config("IDX labels are single bytes".into()));
    }
    let n = data.len() as u32;
    let mut img = Vec::with_capacity(16 + data.len() * data.dim());
    img.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend(n.to_be_bytes());
    img.extend((rows as u32).to_be_bytes());
    img.extend((cols as u32).to_be_bytes());
    img.extend(data.features.as_slice().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend(IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend(n.to_be_bytes());
    lab.extend(data.labels.iter().map(|&y| y as u8));
    fs::write(images, img).map_err(|e| Error::io(images, e))?;
    fs::write(labels, lab).map_err(|e| Error::io(labels, e))?;
    Ok(())
}

/// Reads a CSV with a header row; every column except `label_column` is a
/// feature.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    })?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Config(format!("no column {label_column:?} in {}", path.display())))?;
    let dim = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        for (i, field) in record.iter().enumerate() {
            let parse_err = || Error::Input(format!("{}: row {} column {i}: {field:?}", path.display(), row + 1));
            if i == label_idx {
                labels.push(field.trim().parse::<usize>().map_err(|_| parse_err())?);
            } else {
                data.push(field.trim().parse::<f64>().map_err(|_| parse_err())?);
            }
        }
    }
    let n = labels.len();
    let k = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(Matrix::from_vec(n, dim, data)?, labels, k)
}

/// Writes `x0..x{d-1},label` with full-precision floats.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (row, y) in data.features.iter_rows().zip(&data.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Materializes a spec into train/test splits. Sources without an explicit
/// test file are split 80/20 per class with `seed`.
pub fn load_dataset(spec: &DatasetSpec, seed: u64) -> Result<Split> {
    match spec {
        DatasetSpec::SyntheticGaussians(g) => Ok(gen_gaussian_mixture(g)?.split),
        DatasetSpec::IdxFiles {
            images,
            labels,
            test_images,
            test_labels,
        } => {
            let train = load_idx(images, labels)?;
            match (test_images, test_labels) {
                (Some(ti), Some(tl)) => with_shared_classes(train, load_idx(ti, tl)?),
                (None, None) => stratified_split(&train, TRAIN_FRACTION, seed),
                _ => Err(Error::Config("test_images and test_labels must be given together".into())),
            }
        }
        DatasetSpec::CsvFile {
            path,
            label_column,
            test_path,
        } => {
            let train = load_csv(path, label_column)?;
            match test_path {
                Some(t) => with_shared_classes(train, load_csv(t, label_column)?),
                None => stratified_split(&train, TRAIN_FRACTION, seed),
            }
        }
    }
}

fn with_shared_classes(mut train: Dataset, mut test: Dataset) -> Result<Split> {
    if train.dim() != test.dim() {
        return Err(Error::Input(format!(
            "train dimension {} differs from test dimension {}",
            train.dim(),
            test.dim()
        )));
    }
    let k = train.num_classes.max(test.num_classes);
    train.num_classes = k;
    test.num_classes = k;
    Ok(Split { train, test })
}
