//! Labeled tabular datasets: CSV and value/label directory loaders, a
//! synthetic generator, standardization, and seeded splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const NORMAL: u8 = 0;
pub const ANOMALY: u8 = 1;

/// Feature rows with binary labels (0 = normal, 1 = anomaly).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<u8>,
    pub name: String,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<u8>, name: impl Into<String>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|l| **l > 1) {
            return Err(Error::InvalidParam(format!("label {l} is not 0 or 1")));
        }
        Ok(Self {
            features,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn anomaly_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == ANOMALY).count()
    }

    /// Subset containing only normal-labeled rows.
    pub fn normals_only(&self) -> Dataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.labels[i] == NORMAL)
            .collect();
        self.take_rows(&keep, format!("{}:normals", self.name))
    }

    fn take_rows(&self, indices: &[usize], name: String) -> Dataset {
        let dims = self.dims();
        let mut data = Vec::with_capacity(indices.len() * dims);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            features: Matrix::new(indices.len().max(1), dims, if indices.is_empty() {
                vec![0.0; dims]
            } else {
                data
            })
            .expect("subset rows are finite"),
            labels,
            name,
        }
    }

    fn check_mixed(self) -> Result<Self> {
        let anomalies = self.anomaly_count();
        if anomalies == 0 || anomalies == self.len() {
            return Err(Error::InvalidParam(format!(
                "dataset '{}' must contain both classes (anomaly rate in (0,1)), got {anomalies}/{} anomalies",
                self.name,
                self.len()
            )));
        }
        Ok(self)
    }
}

/// How to find the label column in a CSV header.
#[derive(Debug, Clone)]
pub enum ColumnRef {
    Name(String),
    Index(usize),
}

impl ColumnRef {
    fn resolve(&self, header: &csv::StringRecord, path: &Path) -> Result<usize> {
        match self {
            ColumnRef::Index(i) => {
                if *i < header.len() {
                    Ok(*i)
                } else {
                    Err(Error::Csv {
                        path: path.display().to_string(),
                        line: 1,
                        msg: format!("label column index {i} out of range ({} columns)", header.len()),
                    })
                }
            }
            ColumnRef::Name(name) => header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Csv {
                    path: path.display().to_string(),
                    line: 1,
                    msg: format!("label column '{name}' not found in header"),
                }),
        }
    }
}

fn parse_label(cell: &str, path: &Path, line: u64) -> Result<u8> {
    let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
        path: path.display().to_string(),
        line,
        msg: format!("label '{cell}' is not numeric"),
    })?;
    if v == 0.0 {
        Ok(NORMAL)
    } else if v == 1.0 {
        Ok(ANOMALY)
    } else {
        Err(Error::Csv {
            path: path.display().to_string(),
            line,
            msg: format!("label '{cell}' is not 0 or 1"),
        })
    }
}

/// Loads a header-and-label CSV (credit-card style: decimal features, one
/// integer label column).
pub fn load_labeled_csv(path: &Path, label_column: &ColumnRef) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            },
            _ => Error::Csv {
                path: path.display().to_string(),
                line: 0,
                msg: e.to_string(),
            },
        })?;

    let header = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path.display().to_string(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    let label_idx = label_column.resolve(&header, path)?;
    let n_fields = header.len();
    let dims = n_fields - 1;
    if dims == 0 {
        return Err(Error::Csv {
            path: path.display().to_string(),
            line: 1,
            msg: "file has a label column but zero feature columns".into(),
        });
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Csv {
            path: path.display().to_string(),
            line: e
                .position()
                .map(|p| p.line())
                .unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != n_fields {
            return Err(Error::Csv {
                path: path.display().to_string(),
                line,
                msg: format!("expected {n_fields} fields, found {}", record.len()),
            });
        }
        for (i, cell) in record.iter().enumerate() {
            if i == label_idx {
                labels.push(parse_label(cell, path, line)?);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                    path: path.display().to_string(),
                    line,
                    msg: format!("cell '{cell}' in column {i} is not numeric"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Csv {
                        path: path.display().to_string(),
                        line,
                        msg: format!("cell '{cell}' in column {i} is not finite"),
                    });
                }
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Csv {
            path: path.display().to_string(),
            line: 1,
            msg: "no data rows".into(),
        });
    }
    let features = Matrix::new(labels.len(), dims, data)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "csv".into());
    Dataset::new(features, labels, name)?.check_mixed()
}

/// Loads `<dir>/<name>.txt` (comma-separated feature rows) paired with
/// `<dir>/<name>_label.txt` (one 0/1 per line).
pub fn load_smd_dir(dir: &Path, name: &str) -> Result<Dataset> {
    let value_path = dir.join(format!("{name}.txt"));
    let label_path = dir.join(format!("{name}_label.txt"));
    let values = std::fs::read_to_string(&value_path).map_err(|e| Error::io(&value_path, e))?;
    let label_text =
        std::fs::read_to_string(&label_path).map_err(|e| Error::io(&label_path, e))?;

    let mut data = Vec::new();
    let mut dims = 0usize;
    let mut rows = 0usize;
    for (i, line) in values.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if dims == 0 {
            dims = fields.len();
        } else if fields.len() != dims {
            return Err(Error::Csv {
                path: value_path.display().to_string(),
                line: i as u64 + 1,
                msg: format!("expected {dims} fields, found {}", fields.len()),
            });
        }
        for cell in fields {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                path: value_path.display().to_string(),
                line: i as u64 + 1,
                msg: format!("cell '{cell}' is not numeric"),
            })?;
            data.push(v);
        }
        rows += 1;
    }

    let mut labels = Vec::new();
    for (i, line) in label_text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        labels.push(parse_label(t, &label_path, i as u64 + 1)?);
    }
    if labels.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "{rows} value rows but {} label lines",
            labels.len()
        )));
    }
    let features = Matrix::new(rows, dims, data)?;
    Dataset::new(features, labels, name)?.check_mixed()
}

/// Synthetic fixture: unit Gaussian normals around the origin, anomalies
/// offset 4 units along a random direction with doubled scale.
pub fn generate_synthetic(dims: usize, n: usize, anomaly_rate: f64, seed: u64) -> Result<Dataset> {
    if dims < 2 {
        return Err(Error::InvalidParam(format!("dims must be >= 2, got {dims}")));
    }
    if n < 10 {
        return Err(Error::InvalidParam(format!("n must be >= 10, got {n}")));
    }
    if !(anomaly_rate > 0.0 && anomaly_rate < 0.5) {
        return Err(Error::InvalidParam(format!(
            "anomaly_rate must be in (0, 0.5), got {anomaly_rate}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Random unit direction for the anomaly cluster offset.
    let mut direction: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    for d in direction.iter_mut() {
        *d /= norm;
    }

    let n_anomalies = ((anomaly_rate * n as f64).round() as usize).clamp(1, n - 1);
    let mut labels = vec![ANOMALY; n_anomalies];
    labels.resize(n, NORMAL);
    labels.shuffle(&mut rng);

    let mut data = Vec::with_capacity(n * dims);
    for &label in &labels {
        for d in 0..dims {
            let g: f64 = rng.sample(StandardNormal);
            if label == ANOMALY {
                data.push(4.0 * direction[d] + 2.0 * g);
            } else {
                data.push(g);
            }
        }
    }
    let features = Matrix::new(n, dims, data)?;
    Dataset::new(features, labels, format!("synthetic-{dims}d-{n}"))
}

/// Per-feature affine normalization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationParams {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl StandardizationParams {
    /// Mean and population standard deviation per feature; exactly constant
    /// columns get scale 1 so they standardize to zero.
    pub fn fit(d: &Dataset) -> Self {
        let dims = d.dims();
        let n = d.len() as f64;
        let mut mean = vec![0.0; dims];
        let mut scale = vec![1.0; dims];
        for c in 0..dims {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for r in 0..d.len() {
                let v = d.features.get(r, c);
                sum += v;
                min = min.min(v);
                max = max.max(v);
            }
            if min == max {
                mean[c] = min;
                scale[c] = 1.0;
                continue;
            }
            let m = sum / n;
            let var = (0..d.len())
                .map(|r| {
                    let diff = d.features.get(r, c) - m;
                    diff * diff
                })
                .sum::<f64>()
                / n;
            mean[c] = m;
            scale[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, scale }
    }
}

/// Applies (x − mean)/scale per feature; fits the parameters when none are
/// given.
pub fn standardize(
    d: &Dataset,
    params: Option<&StandardizationParams>,
) -> Result<(Dataset, StandardizationParams)> {
    let fitted;
    let p = match params {
        Some(p) => {
            if p.mean.len() != d.dims() {
                return Err(Error::DimensionMismatch(format!(
                    "params cover {} features, dataset has {}",
                    p.mean.len(),
                    d.dims()
                )));
            }
            p
        }
        None => {
            fitted = StandardizationParams::fit(d);
            &fitted
        }
    };
    let dims = d.dims();
    let features = Matrix::from_fn(d.len(), dims, |r, c| {
        (d.features.get(r, c) - p.mean[c]) / p.scale[c]
    });
    let out = Dataset::new(features, d.labels.clone(), d.name.clone())?;
    Ok((out, p.clone()))
}

/// Seeded shuffle, then prefix/suffix split at round(train_frac · n).
pub fn split(d: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidParam(format!(
            "train_frac must be in (0,1), got {train_frac}"
        )));
    }
    let n = d.len();
    let train_len = (train_frac * n as f64).round() as usize;
    if train_len == 0 || train_len == n {
        return Err(Error::InvalidParam(format!(
            "split of {n} rows at {train_frac} leaves an empty side"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let train = d.take_rows(&indices[..train_len], format!("{}:train", d.name));
    let test = d.take_rows(&indices[train_len..], format!("{}:test", d.name));
    Ok((train, test))
}
