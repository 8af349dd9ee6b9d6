//! Labelled datasets: CSV ingestion, standardisation and synthetic
//! generators with controllable label noise.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GulfError, Result};
use crate::numerics::{DenseMatrix, RngStream};

/// Floor applied to a column's standard deviation when standardising.
pub const STD_FLOOR: f64 = 1e-12;

/// Features plus class-index labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DenseMatrix,
    labels: Vec<usize>,
    num_classes: usize,
    feature_names: Vec<String>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let names = (0..features.cols()).map(|i| format!("x{i}")).collect();
        let classes = (0..num_classes).map(|c| c.to_string()).collect();
        Self::with_names(features, labels, num_classes, names, classes)
    }

    pub fn with_names(
        features: DenseMatrix,
        labels: Vec<usize>,
        num_classes: usize,
        feature_names: Vec<String>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(GulfError::InvalidDimension(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(GulfError::InvalidLabel {
                label: bad,
                valid: format!("0..{num_classes}"),
            });
        }
        if feature_names.len() != features.cols() || class_names.len() != num_classes {
            return Err(GulfError::InvalidDimension("name lists do not match data".into()));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            feature_names,
            class_names,
        })
    }

    pub fn features(&self) -> &DenseMatrix {
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

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// Rows `idx` as a `(features, labels)` pair.
    pub fn batch(&self, idx: &[usize]) -> (DenseMatrix, Vec<usize>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Writes the dataset as CSV with a `label` column last.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut header = self.feature_names.join(",");
        header.push_str(",label\n");
        out.write_all(header.as_bytes())?;
        for (row, &y) in self.features.row_iter().zip(&self.labels) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{},{}", cells.join(","), self.class_names[y])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Per-column affine standardisation fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Err(GulfError::InvalidInput("cannot standardise an empty dataset".into()));
        }
        let d = data.input_dim();
        let mut mean = vec![0.0; d];
        for row in data.features.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; d];
        for row in data.features.row_iter() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| (s / n as f64).sqrt().max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.input_dim() != self.mean.len() {
            return Err(GulfError::InvalidDimension(
                "standardiser fitted on a different width".into(),
            ));
        }
        let mut values = data.features.clone().into_data();
        let d = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            let c = i % d;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        let features = DenseMatrix::new(data.len(), d, values)?;
        Ok(Dataset {
            features,
            ..data.clone()
        })
    }
}

/// Raw CSV contents before class indices are assigned.
struct RawCsv {
    feature_names: Vec<String>,
    rows: Vec<f64>,
    labels: Vec<String>,
}

fn parse_csv(text: &str, label_column: &str) -> Result<RawCsv> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| GulfError::Parse {
            row: 0,
            column: String::new(),
            detail: e.to_string(),
        })?
        .clone();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| GulfError::Parse {
            row: 0,
            column: label_column.to_string(),
            detail: "label column not found in header".into(),
        })?;
    let feature_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // data rows are numbered from 1; the header is row 0
        let row_no = r + 1;
        let record = record.map_err(|e| GulfError::Parse {
            row: row_no,
            column: String::new(),
            detail: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(GulfError::Parse {
                row: row_no,
                column: String::new(),
                detail: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            if c == label_idx {
                labels.push(cell.to_string());
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| GulfError::Parse {
                row: row_no,
                column: header[c].to_string(),
                detail: format!("non-numeric cell {cell:?}"),
            })?;
            if !v.is_finite() {
                return Err(GulfError::Parse {
                    row: row_no,
                    column: header[c].to_string(),
                    detail: format!("non-finite cell {cell:?}"),
                });
            }
            rows.push(v);
        }
    }
    Ok(RawCsv {
        feature_names,
        rows,
        labels,
    })
}

/// Sorted distinct labels: numerically when every label parses as a
/// number, lexicographically otherwise.
fn class_order(labels: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&String> = labels.iter().collect();
    let mut classes: Vec<String> = distinct.into_iter().cloned().collect();
    let numeric: Option<Vec<f64>> = classes.iter().map(|c| c.parse::<f64>().ok()).collect();
    if let Some(vals) = numeric {
        let mut paired: Vec<(f64, String)> = vals.into_iter().zip(classes).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        classes = paired.into_iter().map(|(_, c)| c).collect();
    }
    classes
}

fn build_dataset(raw: RawCsv, classes: &[String]) -> Result<Dataset> {
    let labels = raw
        .labels
        .iter()
        .enumerate()
        .map(|(r, l)| {
            classes.iter().position(|c| c == l).ok_or_else(|| GulfError::Parse {
                row: r + 1,
                column: "label".into(),
                detail: format!("label {l:?} not seen in the training split"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let d = raw.feature_names.len();
    let n = labels.len();
    let features = DenseMatrix::new(n, d, raw.rows)?;
    Dataset::with_names(features, labels, classes.len(), raw.feature_names, classes.to_vec())
}

/// Parses CSV text with a header row. Labels become class indices in sorted
/// order of their distinct values.
pub fn parse_csv_dataset(text: &str, label_column: &str) -> Result<Dataset> {
    let raw = parse_csv(text, label_column)?;
    if raw.labels.is_empty() {
        return Err(GulfError::InvalidInput("dataset has no rows".into()));
    }
    let classes = class_order(&raw.labels);
    build_dataset(raw, &classes)
}

/// Loads a CSV dataset, optionally standardising every feature column with
/// its own mean and standard deviation.
pub fn load_csv_dataset(path: impl AsRef<Path>, label_column: &str, standardize: bool) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let data = parse_csv_dataset(&text, label_column)?;
    if standardize {
        Standardizer::fit(&data)?.apply(&data)
    } else {
        Ok(data)
    }
}

/// Loads a train/test pair sharing the training split's class mapping and,
/// when requested, its standardisation statistics.
pub fn load_csv_split(
    train: impl AsRef<Path>,
    test: impl AsRef<Path>,
    label_column: &str,
    standardize: bool,
) -> Result<(Dataset, Dataset)> {
    let train_data = parse_csv_dataset(&std::fs::read_to_string(train)?, label_column)?;
    let test_raw = parse_csv(&std::fs::read_to_string(test)?, label_column)?;
    if test_raw.feature_names != train_data.feature_names {
        return Err(GulfError::InvalidInput(
            "train and test files have different feature columns".into(),
        ));
    }
    let test_data = build_dataset(test_raw, &train_data.class_names)?;
    if standardize {
        let s = Standardizer::fit(&train_data)?;
        Ok((s.apply(&train_data)?, s.apply(&test_data)?))
    } else {
        Ok((train_data, test_data))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticGenerator {
    /// Isotropic unit-variance Gaussian clusters; two classes sit at
    /// antipodal centres `±separation/2 · u`.
    GaussianBlobs,
    /// Two interleaved half circles of radius `separation` embedded in the
    /// first two coordinates, with unit Gaussian noise on every coordinate.
    TwoArcs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub generator: SyntheticGenerator,
    pub num_classes: usize,
    pub examples_per_class: usize,
    /// Defaults to `examples_per_class`.
    #[serde(default)]
    pub test_examples_per_class: Option<usize>,
    pub input_dim: usize,
    pub class_separation: f64,
    #[serde(default)]
    pub label_noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(GulfError::InvalidParameter("need at least 2 classes".into()));
        }
        if self.examples_per_class == 0 || self.test_examples_per_class == Some(0) {
            return Err(GulfError::InvalidParameter("examples per class must be >= 1".into()));
        }
        if self.input_dim == 0 {
            return Err(GulfError::InvalidParameter("input_dim must be >= 1".into()));
        }
        if !(self.label_noise >= 0.0 && self.label_noise < 0.5) {
            return Err(GulfError::InvalidParameter(format!(
                "label noise must lie in [0, 0.5), got {}",
                self.label_noise
            )));
        }
        if !(self.class_separation >= 0.0) || !self.class_separation.is_finite() {
            return Err(GulfError::InvalidParameter("class separation must be >= 0".into()));
        }
        if self.generator == SyntheticGenerator::TwoArcs
            && (self.num_classes != 2 || self.input_dim < 2)
        {
            return Err(GulfError::InvalidParameter(
                "two-arcs needs 2 classes and input_dim >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Draws independent train and test splits. Label noise touches the
/// training split only.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let mut center_rng = root.child(0);
    let centers = class_centers(spec, &mut center_rng);
    let train_n = spec.examples_per_class;
    let test_n = spec.test_examples_per_class.unwrap_or(train_n);
    let mut train = sample_split(spec, &centers, train_n, &mut root.child(1))?;
    let test = sample_split(spec, &centers, test_n, &mut root.child(2))?;
    if spec.label_noise > 0.0 {
        let mut noise = root.child(3);
        let k = spec.num_classes;
        for y in &mut train.labels {
            if noise.next_f64() < spec.label_noise {
                *y = (*y + 1 + noise.below(k - 1)) % k;
            }
        }
    }
    Ok((train, test))
}

fn class_centers(spec: &SyntheticSpec, rng: &mut RngStream) -> Vec<Vec<f64>> {
    let d = spec.input_dim;
    let half = spec.class_separation / 2.0;
    let unit = |rng: &mut RngStream| {
        let v: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    if spec.num_classes == 2 {
        let u = unit(rng);
        vec![
            u.iter().map(|x| -half * x).collect(),
            u.iter().map(|x| half * x).collect(),
        ]
    } else {
        (0..spec.num_classes)
            .map(|_| unit(rng).into_iter().map(|x| half * x).collect())
            .collect()
    }
}

fn sample_split(
    spec: &SyntheticSpec,
    centers: &[Vec<f64>],
    per_class: usize,
    rng: &mut RngStream,
) -> Result<Dataset> {
    let d = spec.input_dim;
    let k = spec.num_classes;
    let mut values = Vec::with_capacity(per_class * k * d);
    let mut labels = Vec::with_capacity(per_class * k);
    for c in 0..k {
        for _ in 0..per_class {
            let mut x: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
            match spec.generator {
                SyntheticGenerator::GaussianBlobs => {
                    for (xi, ci) in x.iter_mut().zip(&centers[c]) {
                        *xi += ci;
                    }
                }
                SyntheticGenerator::TwoArcs => {
                    let t = std::f64::consts::PI * rng.next_f64();
                    let r = spec.class_separation;
                    let (a, b) = if c == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    x[0] += r * a;
                    x[1] += r * b;
                }
            }
            values.extend_from_slice(&x);
            labels.push(c);
        }
    }
    Dataset::new(DenseMatrix::new(per_class * k, d, values)?, labels, k)
}
