//! Dataset loading (CSV, IDX) and the synthetic two-blob task.

use std::path::{Path, PathBuf};

use crate::autodiff::{Rng, Tensor};
use crate::error::{Error, Result};

/// Row-major features with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 || features.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("features {:?} for {} labels", features.shape(), labels.len()),
            ));
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |&m| m + 1)
    }

    /// Rows in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let d = self.dim();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&self.features.data()[r * d..(r + 1) * d]);
        }
        Dataset {
            features: Tensor::new(vec![rows.len(), d], data).expect("non-empty selection"),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Csv,
    Idx,
}

fn dataset_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Loads `path`. For IDX, `path` is the image file and the labels are read
/// from `labels`, which is required.
pub fn load_dataset(path: &Path, format: DataFormat, labels: Option<&Path>) -> Result<Dataset> {
    match format {
        DataFormat::Csv => load_csv(path),
        DataFormat::Idx => {
            let labels = labels.ok_or_else(|| dataset_err(path, "IDX images need a label file"))?;
            load_idx(path, labels)
        }
    }
}

/// Numeric CSV without header, label in the last column. Every feature
/// column is min-max scaled to `[0, 1]`; a constant column becomes 0.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            dataset_err(path, format!("line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() < 2 {
            return Err(dataset_err(path, format!("line {line}: need at least one feature and a label")));
        }
        let mut values = Vec::with_capacity(record.len());
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| dataset_err(path, format!("line {line}, column {}: not a number: {field:?}", col + 1)))?;
            if !v.is_finite() {
                return Err(dataset_err(path, format!("line {line}, column {}: non-finite value", col + 1)));
            }
            values.push(v);
        }
        let label = values.pop().expect("at least two columns");
        if label < 0.0 || label.fract() != 0.0 {
            return Err(dataset_err(path, format!("line {line}: label {label} is not a class index")));
        }
        labels.push(label as usize);
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(dataset_err(path, "no rows"));
    }
    let d = rows[0].len();
    for col in 0..d {
        let (lo, hi) = rows
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r[col]), hi.max(r[col])));
        for r in &mut rows {
            r[col] = if hi > lo { (r[col] - lo) / (hi - lo) } else { 0.0 };
        }
    }
    let n = rows.len();
    Dataset::new(Tensor::new(vec![n, d], rows.concat())?, labels)
}

/// Parses an unsigned-byte IDX file, returning its dimensions and payload.
fn read_idx(path: &Path, bytes: &[u8]) -> Result<(Vec<usize>, Vec<u8>)> {
    if bytes.len() < 4 {
        return Err(dataset_err(path, "offset 0: file shorter than the IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(dataset_err(path, "offset 0: bad IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(dataset_err(path, format!("offset 2: unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let ndim = bytes[3] as usize;
    if ndim == 0 {
        return Err(dataset_err(path, "offset 3: IDX file without dimensions"));
    }
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(dataset_err(path, format!("offset {}: truncated IDX header", bytes.len())));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(dataset_err(
            path,
            format!("offset {header}: expected {count} data bytes, found {}", bytes.len() - header),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// IDX image file (magic `0x00000803`) plus label file (`0x00000801`).
/// Pixels are divided by 255 and each item is flattened.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (dims, pixels) = read_idx(images, &std::fs::read(images)?)?;
    if dims.len() < 2 {
        return Err(dataset_err(images, "offset 3: image file needs at least two dimensions"));
    }
    let (ldims, lbytes) = read_idx(labels, &std::fs::read(labels)?)?;
    if ldims.len() != 1 {
        return Err(dataset_err(labels, "offset 3: label file must be one-dimensional"));
    }
    if ldims[0] != dims[0] {
        return Err(dataset_err(labels, format!("{} labels for {} images", ldims[0], dims[0])));
    }
    let n = dims[0];
    if n == 0 {
        return Err(dataset_err(images, "no items"));
    }
    let d = dims[1..].iter().product();
    let features = Tensor::new(vec![n, d], pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Dataset::new(features, lbytes.into_iter().map(usize::from).collect())
}

/// Two isotropic unit-variance Gaussian classes in 2-D whose means are
/// `separation` apart along the direction `angle` (radians). Classes
/// alternate.
pub fn two_blobs(n: usize, separation: f64, angle: f64, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("two_blobs needs at least one sample"));
    }
    let (dx, dy) = (angle.cos(), angle.sin());
    let half = separation / 2.0;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let sign = if label == 0 { -1.0 } else { 1.0 };
        data.push(sign * half * dx + rng.gaussian());
        data.push(sign * half * dy + rng.gaussian());
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels)
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        #[serde(default = "default_blob_count")]
        n_train: usize,
        #[serde(default = "default_blob_count")]
        n_test: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

fn default_blob_count() -> usize {
    200
}

fn default_separation() -> f64 {
    4.0
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Blobs {
            n_train: default_blob_count(),
            n_test: default_blob_count(),
            separation: default_separation(),
        }
    }
}

impl DatasetSpec {
    /// Train and test splits. Blobs share one direction, drawn from `seed`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self {
            DatasetSpec::Blobs {
                n_train,
                n_test,
                separation,
            } => {
                let mut rng = Rng::new(seed);
                let angle = 2.0 * std::f64::consts::PI * rng.next_f64();
                let train = two_blobs(*n_train, *separation, angle, &mut rng)?;
                let test = two_blobs(*n_test, *separation, angle, &mut rng)?;
                (train, test)
            }
            DatasetSpec::Csv { train, test } => (load_csv(train)?, load_csv(test)?),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (load_idx(train_images, train_labels)?, load_idx(test_images, test_labels)?),
        };
        if train.dim() != test.dim() {
            return Err(Error::invalid(format!(
                "train has {} features, test has {}",
                train.dim(),
                test.dim()
            )));
        }
        Ok((train, test))
    }
}
