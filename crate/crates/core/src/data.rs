//! Datasets: Iris CSV, MNIST IDX, synthetic blobs, stratified splits and
//! feature standardization.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::RngStream;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const IRIS_FEATURES: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}: no rows")]
    NoRows(PathBuf),
    #[error("{path}, line {line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: not IDX format (magic {found:#010x}, expected {expected:#010x})")]
    NotIdx {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("empty limit: at least one instance must be requested")]
    EmptyLimit,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("split leaves class {class} without training instances")]
    EmptyTrainClass { class: usize },
}

/// One labelled example `z = (x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledInstance {
    pub features: Vec<f64>,
    pub label: usize,
}

impl LabeledInstance {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<LabeledInstance>,
    pub n_features: usize,
    pub n_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        instances: Vec<LabeledInstance>,
        n_features: usize,
        n_classes: usize,
    ) -> Result<Self, DataError> {
        for (i, z) in instances.iter().enumerate() {
            if z.features.len() != n_features {
                return Err(DataError::InvalidParams(format!(
                    "instance {i} has {} features, expected {n_features}",
                    z.features.len()
                )));
            }
            if z.label >= n_classes {
                return Err(DataError::InvalidParams(format!(
                    "instance {i} has label {} >= {n_classes}",
                    z.label
                )));
            }
            if z.features.iter().any(|v| !v.is_finite()) {
                return Err(DataError::InvalidParams(format!("instance {i} has non-finite features")));
            }
        }
        Ok(Self {
            instances,
            n_features,
            n_classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for z in &self.instances {
            counts[z.label] += 1;
        }
        counts
    }

    /// Copy of the dataset restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            n_features: self.n_features,
            n_classes: self.n_classes,
            name: self.name.clone(),
        }
    }

    /// Copy of the dataset without instance `index`.
    pub fn without(&self, index: usize) -> Dataset {
        let mut out = self.clone();
        out.instances.remove(index);
        out
    }

    /// Writes `f0..f{d-1},label` CSV with labels as class indices.
    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let io = |source| DataError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = String::new();
        let header: Vec<String> = (0..self.n_features).map(|j| format!("f{j}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for z in &self.instances {
            for v in &z.features {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", z.label));
        }
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(out.as_bytes()).map_err(io)
    }
}

fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into())
}

/// Loads a CSV of `n_features` real columns followed by a label column.
///
/// A first row whose feature columns do not all parse as numbers is treated
/// as a header. Labels that parse as non-negative integers are used as class
/// indices; otherwise class names are numbered by first occurrence.
pub fn load_csv(path: &Path, n_features: Option<usize>) -> Result<Dataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect()))
        .collect();
    if let Some((_, first)) = rows.first() {
        let d = first.len().saturating_sub(1);
        if first[..d].iter().any(|c| c.parse::<f64>().is_err()) {
            rows.remove(0);
        }
    }
    if rows.is_empty() {
        return Err(DataError::NoRows(path.to_path_buf()));
    }
    let width = n_features.map_or(rows[0].1.len(), |d| d + 1);
    if width < 2 {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            line: rows[0].0,
            reason: "need at least one feature column and a label".into(),
        });
    }
    let d = width - 1;

    let numeric_labels = rows.iter().all(|(_, r)| r.last().is_some_and(|l| l.parse::<usize>().is_ok()));
    let mut names: HashMap<String, usize> = HashMap::new();
    let mut instances = Vec::with_capacity(rows.len());
    for (line, cols) in &rows {
        if cols.len() != width {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                line: *line,
                reason: format!("expected {width} columns, found {}", cols.len()),
            });
        }
        let mut features = Vec::with_capacity(d);
        for (j, c) in cols[..d].iter().enumerate() {
            match c.parse::<f64>() {
                Ok(v) if v.is_finite() => features.push(v),
                _ => {
                    return Err(DataError::Malformed {
                        path: path.to_path_buf(),
                        line: *line,
                        reason: format!("column {j}: cannot parse {c:?} as a finite number"),
                    })
                }
            }
        }
        let raw = cols[d];
        if raw.is_empty() {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                line: *line,
                reason: "empty label".into(),
            });
        }
        let label = if numeric_labels {
            raw.parse::<usize>().expect("checked above")
        } else {
            let next = names.len();
            *names.entry(raw.to_string()).or_insert(next)
        };
        instances.push(LabeledInstance { features, label });
    }
    let n_classes = if numeric_labels {
        instances.iter().map(|z| z.label).max().unwrap_or(0) + 1
    } else {
        names.len()
    };
    Dataset::new(dataset_name(path), instances, d, n_classes)
}

/// Iris CSV: 4 feature columns + species name or index, optional header.
pub fn load_iris(path: &Path) -> Result<Dataset, DataError> {
    let mut ds = load_csv(path, Some(IRIS_FEATURES))?;
    ds.name = "iris".into();
    Ok(ds)
}

fn read_be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Malformed {
            path: path.to_path_buf(),
            line: 0,
            reason: format!("truncated header at byte {at}"),
        })
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an IDX3 image file and IDX1 label file. Pixels are scaled to
/// `[0, 1]` and flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset, DataError> {
    if limit == Some(0) {
        return Err(DataError::EmptyLimit);
    }
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    let magic = read_be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::NotIdx {
            path: images_path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let magic = read_be_u32(&labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::NotIdx {
            path: labels_path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_images = read_be_u32(&images, 4, images_path)? as usize;
    let rows = read_be_u32(&images, 8, images_path)? as usize;
    let cols = read_be_u32(&images, 12, images_path)? as usize;
    let n_labels = read_be_u32(&labels, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(DataError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let d = rows * cols;
    if images.len() < 16 + n_images * d || labels.len() < 8 + n_labels {
        return Err(DataError::Malformed {
            path: images_path.to_path_buf(),
            line: 0,
            reason: "payload shorter than header counts".into(),
        });
    }
    let n = limit.map_or(n_images, |l| l.min(n_images));
    let instances: Vec<LabeledInstance> = (0..n)
        .map(|i| LabeledInstance {
            features: images[16 + i * d..16 + (i + 1) * d]
                .iter()
                .map(|&p| p as f64 / 255.0)
                .collect(),
            label: labels[8 + i] as usize,
        })
        .collect();
    let n_classes = labels[8..8 + n_labels].iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    Dataset::new("mnist", instances, d, n_classes)
}

/// `k` Gaussian clusters whose consecutive means are one unit apart along
/// the diagonal direction. Labels are assigned round-robin.
pub fn synth_blobs(n: usize, d: usize, k: usize, spread: f64, stream: &mut RngStream) -> Result<Dataset, DataError> {
    if k < 2 || n < k || d == 0 || !(spread > 0.0) {
        return Err(DataError::InvalidParams(format!(
            "synth_blobs needs n >= k >= 2, d >= 1, spread > 0 (got n={n}, d={d}, k={k}, spread={spread})"
        )));
    }
    let step = 1.0 / (d as f64).sqrt();
    let instances = (0..n)
        .map(|i| {
            let label = i % k;
            let center = label as f64 * step;
            let features = stream.normal(d).into_iter().map(|e| center + spread * e).collect();
            LabeledInstance { features, label }
        })
        .collect();
    Dataset::new("blobs", instances, d, k)
}

/// Stratified split. Returns `(train, test)` and the index partition.
pub fn split_indices(ds: &Dataset, test_fraction: f64, stream: &mut RngStream) -> Result<(Vec<usize>, Vec<usize>), DataError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DataError::InvalidParams(format!("test fraction {test_fraction} not in (0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, z) in ds.instances.iter().enumerate() {
        by_class[z.label].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        let n_test = (test_fraction * members.len() as f64).round() as usize;
        if n_test >= members.len() {
            return Err(DataError::EmptyTrainClass { class });
        }
        stream.shuffle(members);
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(ds: &Dataset, test_fraction: f64, stream: &mut RngStream) -> Result<(Dataset, Dataset), DataError> {
    let (train, test) = split_indices(ds, test_fraction, stream)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Features whose std fell below the clamp threshold and was set to 1.
    pub clamped: Vec<usize>,
}

impl StandardizationStats {
    pub fn fit(train: &Dataset) -> Self {
        let n = train.len() as f64;
        let d = train.n_features;
        let mut mean = vec![0.0; d];
        for z in &train.instances {
            for (m, v) in mean.iter_mut().zip(&z.features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for z in &train.instances {
            for j in 0..d {
                var[j] += (z.features[j] - mean[j]).powi(2);
            }
        }
        let mut clamped = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    clamped.push(j);
                    1.0
                }
            })
            .collect();
        Self { mean, std, clamped }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        for z in &mut out.instances {
            for j in 0..z.features.len() {
                z.features[j] = (z.features[j] - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// Fits statistics on `train` (population std) and applies them to every set.
pub fn standardize(train: &Dataset, others: &[Dataset]) -> (Dataset, Vec<Dataset>, StandardizationStats) {
    let stats = StandardizationStats::fit(train);
    let train2 = stats.apply(train);
    let others2 = others.iter().map(|o| stats.apply(o)).collect();
    (train2, others2, stats)
}
