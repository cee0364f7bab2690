//! Tabular datasets: CSV ingestion, stratified splits, z-score normalization
//! and synthetic generators.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::escape::DoubleWell;
use crate::math::RandomSource;

/// Dense feature matrix with contiguous integer labels.
///
/// Features are stored row-major. `label_names[c]` is the raw label that was
/// remapped to class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
    label_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let label_names = (0..classes).map(|c| c.to_string()).collect();
        Self::with_label_names(name, features, dim, labels, classes, label_names)
    }

    pub fn with_label_names(
        name: impl Into<String>,
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        classes: usize,
        label_names: Vec<String>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        if dim == 0 {
            return Err(invalid("dataset needs at least one feature"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                context: "dataset features",
                expected: labels.len() * dim,
                found: features.len(),
            });
        }
        if label_names.len() != classes {
            return Err(Error::DimensionMismatch {
                context: "label names",
                expected: classes,
                found: label_names.len(),
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("feature {} of sample {}", i % dim, i / dim)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::ClassOutOfRange { label: bad, classes });
        }
        Ok(Self {
            name: name.into(),
            features,
            dim,
            labels,
            classes,
            label_names,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimension `I`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Class count `C`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.features.chunks_exact(self.dim).zip(self.labels.iter().copied())
    }

    /// Rows at `indices`, in that order. Class count and label names are kept.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            name: self.name.clone(),
            features,
            dim: self.dim,
            labels,
            classes: self.classes,
            label_names: self.label_names.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

/// How to read a delimited file. Row and column numbers in errors are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Zero-based label column; `None` means the last column.
    #[serde(default)]
    pub label_column: Option<usize>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub has_header: bool,
}

fn default_delimiter() -> char {
    ','
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: None,
            delimiter: ',',
            has_header: false,
        }
    }
}

fn csv_error(path: &Path, row: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Csv {
        path: path.to_path_buf(),
        row,
        column,
        message: message.into(),
    }
}

/// Sorted distinct raw labels: numerically if every label parses as a number,
/// lexicographically otherwise.
fn sorted_label_names(raw: &[String]) -> Vec<String> {
    let mut distinct: Vec<String> = raw.to_vec();
    distinct.sort();
    distinct.dedup();
    let numeric: Option<Vec<f64>> = distinct.iter().map(|s| s.parse::<f64>().ok()).collect();
    if let Some(values) = numeric {
        let mut pairs: Vec<(f64, String)> = values.into_iter().zip(distinct).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        pairs.into_iter().map(|(_, s)| s).collect()
    } else {
        distinct
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let delimiter = u8::try_from(schema.delimiter)
        .map_err(|_| invalid(format!("delimiter {:?} is not a single byte", schema.delimiter)))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;

    let mut width = None;
    let mut label_col = 0;
    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    let first_row = if schema.has_header { 2 } else { 1 };
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = record.position().map_or(first_row + i, |p| p.line() as usize);
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        match width {
            None => {
                if record.len() < 2 {
                    return Err(csv_error(path, row, 1, "need at least one feature and a label"));
                }
                label_col = schema.label_column.unwrap_or(record.len() - 1);
                if label_col >= record.len() {
                    return Err(csv_error(
                        path,
                        row,
                        label_col + 1,
                        format!("label column beyond the {} columns present", record.len()),
                    ));
                }
                width = Some(record.len());
            }
            Some(w) if w != record.len() => {
                return Err(csv_error(
                    path,
                    row,
                    record.len().min(w) + 1,
                    format!("expected {w} columns, found {}", record.len()),
                ));
            }
            Some(_) => {}
        }
        for (c, cell) in record.iter().enumerate() {
            if c == label_col {
                raw_labels.push(cell.to_string());
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| csv_error(path, row, c + 1, format!("cannot parse {cell:?} as a number")))?;
            if !v.is_finite() {
                return Err(csv_error(path, row, c + 1, format!("non-finite value {cell:?}")));
            }
            features.push(v);
        }
    }
    let Some(width) = width else {
        return Err(Error::Empty("csv file has no data rows"));
    };

    let label_names = sorted_label_names(&raw_labels);
    if label_names.len() < 2 {
        return Err(invalid(format!(
            "{}: only one distinct label ({:?})",
            path.display(),
            label_names.first().map(String::as_str).unwrap_or("")
        )));
    }
    let index: BTreeMap<&str, usize> = label_names.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let labels = raw_labels.iter().map(|s| index[s.as_str()]).collect();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let classes = label_names.len();
    Dataset::with_label_names(name, features, width - 1, labels, classes, label_names)
}

/// Writes features followed by the raw label in the last column, no header.
/// Floats are written in shortest round-trip form.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    let mut row = Vec::with_capacity(dataset.dim() + 1);
    for (x, y) in dataset.iter() {
        row.clear();
        row.extend(x.iter().map(|v| format!("{v:?}")));
        row.push(dataset.label_names()[y].clone());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Train/validation/test fractions plus the shuffling seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    #[serde(default = "yes")]
    pub stratified: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            fractions: [0.6, 0.2, 0.2],
            stratified: true,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(invalid(format!(
                "split fractions must be > 0, got {:?}",
                self.fractions
            )));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Largest-remainder allocation of `n` items over `fractions`; ties go to the
/// earlier split.
fn allocate(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = (q + 1e-9).floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for k in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Splits into disjoint train/validation/test sets.
///
/// Stratified splitting allocates each class separately; if any class has
/// fewer than three samples the whole split falls back to unstratified.
/// Rows keep their original relative order inside each split.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if dataset.len() < 3 {
        return Err(invalid(format!(
            "need at least 3 samples to split, got {}",
            dataset.len()
        )));
    }
    let mut rng = RandomSource::new(spec.seed);
    let mut parts: [Vec<usize>; 3] = Default::default();

    let mut stratified = spec.stratified;
    if stratified && dataset.class_counts().iter().any(|&n| n > 0 && n < 3) {
        log::warn!(
            "dataset {:?} has a class with fewer than 3 samples; splitting unstratified",
            dataset.name()
        );
        stratified = false;
    }

    let groups: Vec<Vec<usize>> = if stratified {
        let mut by_class = vec![Vec::new(); dataset.classes()];
        for (i, &y) in dataset.labels().iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    } else {
        vec![(0..dataset.len()).collect()]
    };

    for mut group in groups {
        rng.shuffle(&mut group);
        let counts = allocate(group.len(), &spec.fractions);
        let mut start = 0;
        for (part, n) in parts.iter_mut().zip(counts) {
            part.extend_from_slice(&group[start..start + n]);
            start += n;
        }
    }

    if parts.iter().any(Vec::is_empty) {
        return Err(invalid(format!(
            "fractions {:?} leave a split empty for {} samples",
            spec.fractions,
            dataset.len()
        )));
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(Splits {
        train: dataset.subset(&train),
        val: dataset.subset(&val),
        test: dataset.subset(&test),
    })
}

/// Per-feature training statistics. `std` is the population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(train: &Dataset) -> Self {
        let n = train.len() as f64;
        let dim = train.dim();
        let mut mean = vec![0.0; dim];
        for (x, _) in train.iter() {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for (x, _) in train.iter() {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Self { mean, std }
    }

    /// `(x - mean) / std`; zero-variance features are only centered.
    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        if d.dim() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                context: "normalization",
                expected: self.mean.len(),
                found: d.dim(),
            });
        }
        let mut out = d.clone();
        for row in out.features.chunks_exact_mut(d.dim()) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v -= m;
                if *s > 0.0 {
                    *v /= s;
                }
            }
        }
        Ok(out)
    }
}

/// Normalizes `train` and every dataset in `others` with statistics from `train`.
pub fn zscore_normalize(train: &Dataset, others: &[&Dataset]) -> Result<(Dataset, Vec<Dataset>, NormStats)> {
    let stats = NormStats::fit(train);
    let train = stats.apply(train)?;
    let others = others.iter().map(|d| stats.apply(d)).collect::<Result<_>>()?;
    Ok((train, others, stats))
}

impl Splits {
    pub fn normalized(&self) -> Result<(Splits, NormStats)> {
        let (train, others, stats) = zscore_normalize(&self.train, &[&self.val, &self.test])?;
        let [val, test]: [Dataset; 2] = others.try_into().expect("two datasets in, two out");
        Ok((Splits { train, val, test }, stats))
    }
}

/// Gaussian blobs with unit covariance.
///
/// Class `c` is centered at `±separation * e_k` with `k = c mod dim`, the sign
/// flipping once every axis has been used, so at most `2 * dim` classes fit.
/// Samples are generated class by class.
pub fn make_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(invalid("blobs need at least 2 classes"));
    }
    if per_class == 0 || dim == 0 {
        return Err(invalid("blobs need per_class >= 1 and dim >= 1"));
    }
    if classes > 2 * dim {
        return Err(invalid(format!(
            "{classes} classes do not fit on the 2*{dim} axis vertices"
        )));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(invalid(format!("separation must be >= 0, got {separation}")));
    }
    let mut rng = RandomSource::new(seed);
    let mut features = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let axis = c % dim;
        let sign = if c < dim { 1.0 } else { -1.0 };
        for _ in 0..per_class {
            for k in 0..dim {
                let center = if k == axis { sign * separation } else { 0.0 };
                features.push(center + rng.standard_normal());
            }
            labels.push(c);
        }
    }
    Dataset::new("blobs", features, dim, labels, classes)
}

/// One-dimensional quartic with a wide minimum at `-1` and a minimum at
/// `sharpness_ratio` whose curvature is `sharpness_ratio` times larger.
pub fn make_double_well(sharpness_ratio: f64) -> Result<DoubleWell> {
    DoubleWell::new(sharpness_ratio)
}
