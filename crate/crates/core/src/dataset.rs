//! Datasets: synthetic generators, CSV ingestion and the train/test/label split.
//!
//! A [`Dataset`] is an immutable bundle of an `n × d` feature matrix, integer
//! class labels, a labeled/unlabeled mask and opaque sample identifiers.
//! Learners only ever see labels where `labeled_mask` is true.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: DMatrix<f64>,
    labels: Vec<usize>,
    labeled_mask: Vec<bool>,
    sample_ids: Vec<String>,
}

impl Dataset {
    pub fn new(
        features: DMatrix<f64>,
        labels: Vec<usize>,
        labeled_mask: Vec<bool>,
        sample_ids: Vec<String>,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || labeled_mask.len() != n || sample_ids.len() != n {
            return Err(Error::shape(format!(
                "{} feature rows, {} labels, {} mask entries, {} ids",
                n,
                labels.len(),
                labeled_mask.len(),
                sample_ids.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            let (row, col) = (pos % n.max(1), pos / n.max(1));
            return Err(Error::invalid(format!(
                "non-finite feature at sample {row}, column {col}"
            )));
        }
        Ok(Self {
            features,
            labels,
            labeled_mask,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled_mask
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_mask.iter().filter(|&&m| m).count()
    }

    /// Sorted distinct class identifiers.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Indices of each class in ascending sample order.
    pub fn class_indices(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &c) in self.labels.iter().enumerate() {
            map.entry(c).or_default().push(i);
        }
        map
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        let features = self.features.select_rows(rows);
        Dataset {
            features,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            labeled_mask: rows.iter().map(|&i| self.labeled_mask[i]).collect(),
            sample_ids: rows.iter().map(|&i| self.sample_ids[i].clone()).collect(),
        }
    }

    pub fn with_labeled_mask(&self, mask: Vec<bool>) -> Result<Dataset> {
        if mask.len() != self.len() {
            return Err(Error::shape(format!(
                "mask of length {} for {} samples",
                mask.len(),
                self.len()
            )));
        }
        Ok(Dataset {
            labeled_mask: mask,
            ..self.clone()
        })
    }

    /// Writes the dataset in the CSV schema read by [`load_features_csv`]:
    /// `id,label,f0,f1,...`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "id,label")?;
        for j in 0..self.dim() {
            write!(out, ",f{j}")?;
        }
        writeln!(out)?;
        for i in 0..self.len() {
            write!(out, "{},{}", self.sample_ids[i], self.labels[i])?;
            for j in 0..self.dim() {
                // `{}` on f64 prints the shortest string that round-trips.
                write!(out, ",{}", self.features[(i, j)])?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Two interleaved unit half-circles. Class 0 lies on `(cos t, sin t)`,
/// class 1 on `(1 - cos t, 0.5 - sin t)`, with `t` evenly spaced on `[0, π]`
/// and isotropic Gaussian noise of standard deviation `noise`.
pub fn make_two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 4 || n % 2 != 0 {
        return Err(Error::invalid(format!(
            "two-moons needs an even n >= 4, got {n}"
        )));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::invalid(format!("noise must be >= 0, got {noise}")));
    }
    let half = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = DMatrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for class in 0..2 {
        for k in 0..half {
            let t = PI * k as f64 / (half - 1) as f64;
            let (x, y) = if class == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            let row = class * half + k;
            features[(row, 0)] = x + noise * normal.sample(&mut rng);
            features[(row, 1)] = y + noise * normal.sample(&mut rng);
            labels.push(class);
        }
    }
    let ids = (0..n).map(|i| format!("moon-{i}")).collect();
    Dataset::new(features, labels, vec![true; n], ids)
}

/// Isotropic Gaussian blobs, `per_class` points around each center.
pub fn make_blobs(centers: &[Vec<f64>], per_class: usize, std: f64, seed: u64) -> Result<Dataset> {
    if centers.is_empty() || per_class == 0 {
        return Err(Error::invalid("blobs need at least one center and one point"));
    }
    let d = centers[0].len();
    if centers.iter().any(|c| c.len() != d) {
        return Err(Error::shape("blob centers differ in dimension"));
    }
    if !(std >= 0.0) {
        return Err(Error::invalid(format!("std must be >= 0, got {std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = centers.len() * per_class;
    let mut features = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for k in 0..per_class {
            let row = c * per_class + k;
            for j in 0..d {
                features[(row, j)] = center[j] + std * normal.sample(&mut rng);
            }
            labels.push(c);
        }
    }
    let ids = (0..n).map(|i| format!("blob-{i}")).collect();
    Dataset::new(features, labels, vec![true; n], ids)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvSchema {
    pub label_column: String,
    pub id_column: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".into(),
            id_column: Some("id".into()),
        }
    }
}

/// Reads a header-first CSV. The label column is mandatory; the id column is
/// used when present in the header. Every other column is a feature, in
/// left-to-right order. Row numbers in errors count data rows from 1.
pub fn load_features_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let csv_err = |row: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| csv_err(0, e.to_string()))?
        .clone();
    let label_col = header
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| csv_err(0, format!("missing label column `{}`", schema.label_column)))?;
    let id_col = schema
        .id_column
        .as_ref()
        .and_then(|name| header.iter().position(|h| h == name));
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&c| c != label_col && Some(c) != id_col)
        .collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| csv_err(row, e.to_string()))?;
        if record.len() != header.len() {
            return Err(csv_err(
                row,
                format!("expected {} columns, found {}", header.len(), record.len()),
            ));
        }
        let label_str = &record[label_col];
        let label: usize = label_str
            .parse()
            .map_err(|_| csv_err(row, format!("label `{label_str}` is not a non-negative integer")))?;
        labels.push(label);
        ids.push(match id_col {
            Some(c) => record[c].to_string(),
            None => format!("row-{row}"),
        });
        for &c in &feature_cols {
            let cell = &record[c];
            let v: f64 = cell.parse().map_err(|_| {
                csv_err(row, format!("column `{}`: `{cell}` is not a number", &header[c]))
            })?;
            if !v.is_finite() {
                return Err(csv_err(row, format!("column `{}`: non-finite value", &header[c])));
            }
            values.push(v);
        }
    }
    let n = labels.len();
    let features = DMatrix::from_row_slice(n, feature_cols.len(), &values);
    Dataset::new(features, labels, vec![true; n], ids)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_per_class: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_per_class == 0 {
            return Err(Error::invalid("train_per_class must be >= 1"));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "labeled_fraction must lie in (0, 1], got {}",
                self.labeled_fraction
            )));
        }
        Ok(())
    }

    /// Labeled samples per class: `ceil(fraction × train_per_class)`.
    pub fn labeled_per_class(&self) -> usize {
        labeled_count(self.labeled_fraction, self.train_per_class)
    }
}

// The 1e-9 guard keeps products like 0.7 * 10 = 7.000000000000001 from
// rounding up to 8.
fn labeled_count(fraction: f64, per_class: usize) -> usize {
    let raw = (fraction * per_class as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(per_class)
}

/// Stratified train/test split followed by stratified label masking, both
/// driven by `spec.seed`. Use [`split`] and [`mask_labels`] directly to give
/// the two stages independent seeds.
pub fn split_and_mask(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let (train, test) = split(ds, spec.train_per_class, spec.seed)?;
    let train = mask_labels(&train, spec.labeled_fraction, spec.seed)?;
    Ok((train, test))
}

/// Picks `train_per_class` random samples of every class for training; the
/// rest form the test set. Both keep source order. The test set is fully
/// labeled, the train set keeps its source mask until [`mask_labels`].
pub fn split(ds: &Dataset, train_per_class: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if train_per_class == 0 {
        return Err(Error::invalid("train_per_class must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (class, mut members) in ds.class_indices() {
        if members.len() <= train_per_class {
            return Err(Error::InsufficientSamples {
                class,
                available: members.len(),
                required: train_per_class,
            });
        }
        members.shuffle(&mut rng);
        train_idx.extend_from_slice(&members[..train_per_class]);
        test_idx.extend_from_slice(&members[train_per_class..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let train = ds.subset(&train_idx);
    let test = ds.subset(&test_idx).with_labeled_mask(vec![true; test_idx.len()])?;
    Ok((train, test))
}

/// Marks `ceil(fraction × class size)` random samples of each class as
/// labeled and hides the rest.
pub fn mask_labels(ds: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "labeled fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_6265_6c73_u64);
    let mut mask = vec![false; ds.len()];
    for (_, mut members) in ds.class_indices() {
        let count = labeled_count(fraction, members.len());
        members.shuffle(&mut rng);
        for &i in &members[..count] {
            mask[i] = true;
        }
    }
    ds.with_labeled_mask(mask)
}
