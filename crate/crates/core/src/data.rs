//! Dataset ingestion: synthetic pass-through, CSV tables and IDX image archives.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::SyntheticTask;

/// Row-major feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    dim: usize,
    values: Vec<f64>,
}

impl Features {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(Error::Dimension {
                expected: dim,
                got: values.len(),
            });
        }
        Ok(Self { dim, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            values,
        }
    }
}

/// Features with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Features,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().map(|&y| y as f64).sum::<f64>() / self.len() as f64
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn take(&self, count: usize) -> Self {
        let count = count.min(self.len());
        self.select(&(0..count).collect::<Vec<_>>())
    }
}

/// A seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Synthetic {
        task: SyntheticTask,
        n_train: usize,
        n_test: usize,
        seed: u64,
    },
    /// First column label, remaining columns features. With no separate test file the
    /// first `test_rows` rows are held out.
    Csv {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
        #[serde(default)]
        header: bool,
        #[serde(default)]
        test_rows: usize,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Unit range for images, z-score for tables, nothing for synthetic data.
    #[default]
    Auto,
    None,
    UnitRange,
    ZScore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: Source,
    /// Original labels mapped to 1; everything else maps to 0.
    #[serde(default = "default_positive")]
    pub positive_labels: Vec<i64>,
    /// Labels must lie in `0..classes` when set.
    #[serde(default)]
    pub classes: Option<i64>,
    #[serde(default)]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub test_limit: Option<usize>,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub normalization: Normalization,
}

fn default_positive() -> Vec<i64> {
    vec![1]
}

impl DatasetSpec {
    pub fn new(source: Source) -> Self {
        Self {
            source,
            positive_labels: default_positive(),
            classes: None,
            train_limit: None,
            test_limit: None,
            shuffle_seed: 0,
            normalization: Normalization::Auto,
        }
    }

    /// The standard digit archive layout under `dir`, binarized as `digit`-vs-rest.
    pub fn digits(dir: &Path, digit: i64) -> Self {
        let mut spec = Self::new(Source::Idx {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            test_images: dir.join("t10k-images-idx3-ubyte"),
            test_labels: dir.join("t10k-labels-idx1-ubyte"),
        });
        spec.positive_labels = vec![digit];
        spec.classes = Some(10);
        spec
    }
}

/// Raw rows before binarization.
#[derive(Debug)]
struct RawTable {
    features: Features,
    labels: Vec<i64>,
}

/// Loads, binarizes and normalizes; shuffles the training rows with `shuffle_seed`.
pub fn load(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    let (train, test, default_norm) = match &spec.source {
        Source::Synthetic {
            task,
            n_train,
            n_test,
            seed,
        } => {
            task.validate()?;
            let train = task.sample(*n_train, *seed);
            let test = task.sample(*n_test, seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
            return Ok(finish(spec, train, test, Normalization::None));
        }
        Source::Csv {
            train,
            test,
            header,
            test_rows,
        } => {
            let table = read_csv(train, *header)?;
            check_classes(spec, &table)?;
            let (tr, te) = match test {
                Some(path) => {
                    let test_table = read_csv(path, *header)?;
                    check_classes(spec, &test_table)?;
                    (binarize(spec, table), binarize(spec, test_table))
                }
                None => {
                    let all = binarize(spec, table);
                    if *test_rows > all.len() {
                        return Err(Error::Config(format!(
                            "test_rows = {test_rows} exceeds {} rows",
                            all.len()
                        )));
                    }
                    let te: Vec<usize> = (0..*test_rows).collect();
                    let tr: Vec<usize> = (*test_rows..all.len()).collect();
                    (all.select(&tr), all.select(&te))
                }
            };
            (tr, te, Normalization::ZScore)
        }
        Source::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = read_idx_pair(train_images, train_labels)?;
            let test = read_idx_pair(test_images, test_labels)?;
            check_classes(spec, &train)?;
            check_classes(spec, &test)?;
            (binarize(spec, train), binarize(spec, test), Normalization::UnitRange)
        }
    };
    Ok(finish(spec, train, test, default_norm))
}

fn finish(spec: &DatasetSpec, train: Dataset, test: Dataset, default_norm: Normalization) -> (Dataset, Dataset) {
    let order = shuffled_indices(train.len(), spec.shuffle_seed);
    let mut train = train.select(&order);
    if let Some(limit) = spec.train_limit {
        train = train.take(limit);
    }
    let mut test = test;
    if let Some(limit) = spec.test_limit {
        test = test.take(limit);
    }
    let norm = match spec.normalization {
        Normalization::Auto => default_norm,
        other => other,
    };
    match norm {
        Normalization::Auto | Normalization::None => {}
        Normalization::UnitRange => {
            let (lo, hi) = unit_range_bounds(&train.features);
            apply_affine(&mut train.features, lo, hi);
            apply_affine(&mut test.features, lo, hi);
        }
        Normalization::ZScore => {
            let (mean, scale) = zscore_params(&train.features);
            apply_zscore(&mut train.features, &mean, &scale);
            apply_zscore(&mut test.features, &mean, &scale);
        }
    }
    (train, test)
}

fn check_classes(spec: &DatasetSpec, table: &RawTable) -> Result<()> {
    for (record, &label) in table.labels.iter().enumerate() {
        let bad = label < 0 || spec.classes.is_some_and(|c| label >= c);
        if bad {
            return Err(Error::LabelRange { label, record });
        }
    }
    Ok(())
}

fn binarize(spec: &DatasetSpec, table: RawTable) -> Dataset {
    let labels = table
        .labels
        .iter()
        .map(|l| spec.positive_labels.contains(l) as u8)
        .collect();
    Dataset {
        features: table.features,
        labels,
    }
}

/// One affine map for all features, fitted on the training rows. Pixels share a scale, so
/// a per-feature range would blow up near-constant border pixels.
fn unit_range_bounds(train: &Features) -> (f64, f64) {
    let lo = train.values.iter().copied().fold(0.0, f64::min);
    let hi = train.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn apply_affine(features: &mut Features, lo: f64, hi: f64) {
    let span = hi - lo;
    for v in features.values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

fn zscore_params(features: &Features) -> (Vec<f64>, Vec<f64>) {
    let n = features.len().max(1) as f64;
    let dim = features.dim();
    let mut mean = vec![0.0; dim];
    for row in features.rows() {
        for (d, &v) in row.iter().enumerate() {
            mean[d] += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for row in features.rows() {
        for (d, &v) in row.iter().enumerate() {
            var[d] += (v - mean[d]).powi(2);
        }
    }
    let scale = var
        .into_iter()
        .map(|v| {
            let sd = (v / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

fn apply_zscore(features: &mut Features, mean: &[f64], scale: &[f64]) {
    let dim = features.dim;
    for (i, v) in features.values.iter_mut().enumerate() {
        let d = i % dim;
        *v = (*v - mean[d]) / scale[d];
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

fn read_csv(path: &Path, header: bool) -> Result<RawTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(path, &text, header)
}

fn parse_csv(path: &Path, text: &str, header: bool) -> Result<RawTable> {
    let mut dim = None;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut offset = 0u64;
    for (line_no, line) in text.split_inclusive('\n').enumerate() {
        let at = offset;
        offset += line.len() as u64;
        if header && line_no == 0 {
            continue;
        }
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let mut col_offset = at;
        let mut fields = Vec::new();
        for field in line.split(',') {
            fields.push((col_offset, field.trim()));
            col_offset += field.len() as u64 + 1;
        }
        let (label_at, label_text) = fields[0];
        let label_value: f64 = label_text
            .parse()
            .map_err(|_| parse_error(path, label_at, format!("bad label '{label_text}'")))?;
        if label_value.fract() != 0.0 || !label_value.is_finite() {
            return Err(Error::LabelRange {
                label: label_value as i64,
                record: labels.len(),
            });
        }
        let row_dim = fields.len() - 1;
        match dim {
            None if row_dim == 0 => return Err(parse_error(path, at, "row has no features")),
            None => dim = Some(row_dim),
            Some(d) if d != row_dim => {
                return Err(parse_error(path, at, format!("expected {d} features, found {row_dim}")))
            }
            _ => {}
        }
        for &(field_at, field) in &fields[1..] {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_error(path, field_at, format!("bad number '{field}'")))?;
            values.push(v);
        }
        labels.push(label_value as i64);
    }
    let dim = dim.ok_or_else(|| parse_error(path, 0, "no data rows"))?;
    Ok(RawTable {
        features: Features::new(dim, values)?,
        labels,
    })
}

/// Writes `label,f1,...,fd` rows with shortest round-trip formatting.
pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for (row, &y) in data.features.rows().zip(&data.labels) {
        write!(w, "{y}").map_err(io)?;
        for v in row {
            write!(w, ",{v:?}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Learner-facing feature table without labels.
pub fn write_features(path: &Path, features: &Features) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for row in features.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_features(path: &Path) -> Result<Features> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dim = None;
    let mut values = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let at = offset;
        offset += line.len() as u64;
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<&str> = line.split(',').collect();
        if *dim.get_or_insert(row.len()) != row.len() {
            return Err(parse_error(path, at, "ragged feature row"));
        }
        for field in row {
            values.push(
                field
                    .trim()
                    .parse()
                    .map_err(|_| parse_error(path, at, format!("bad number '{field}'")))?,
            );
        }
    }
    Features::new(dim.ok_or_else(|| parse_error(path, 0, "no rows"))?, values)
}

/// A parsed IDX array: dimensions and values widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn parse_idx(path: &Path, bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(parse_error(path, bytes.len() as u64, "truncated magic number"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_error(path, 0, "magic number must start with two zero bytes"));
    }
    let width = match bytes[2] {
        0x08 | 0x09 => 1,
        0x0B => 2,
        0x0C | 0x0D => 4,
        0x0E => 8,
        other => return Err(parse_error(path, 2, format!("unknown element type 0x{other:02x}"))),
    };
    let ndims = bytes[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(parse_error(path, bytes.len() as u64, "truncated dimension list"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|d| u32::from_be_bytes(bytes[4 + 4 * d..8 + 4 * d].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let expected = header + count * width;
    if bytes.len() != expected {
        return Err(parse_error(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let body = &bytes[header..];
    let values = match bytes[2] {
        0x08 => body.iter().map(|&b| b as f64).collect(),
        0x09 => body.iter().map(|&b| b as i8 as f64).collect(),
        0x0B => body.chunks_exact(2).map(|c| i16::from_be_bytes([c[0], c[1]]) as f64).collect(),
        0x0C => body
            .chunks_exact(4)
            .map(|c| i32::from_be_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        0x0D => body
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => body
            .chunks_exact(8)
            .map(|c| f64::from_be_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(IdxArray { dims, values })
}

/// Encodes unsigned-byte arrays; used to build small archives for tests and fixtures.
pub fn encode_idx_u8(dims: &[usize], values: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(values);
    out
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(path, &read_bytes(path)?)
}

fn read_idx_pair(images: &Path, labels: &Path) -> Result<RawTable> {
    let img = read_idx(images)?;
    let lab = read_idx(labels)?;
    if lab.dims.len() != 1 {
        return Err(parse_error(labels, 3, "label archive must be one-dimensional"));
    }
    let n = lab.dims[0];
    if img.dims.first() != Some(&n) {
        return Err(parse_error(images, 4, format!("image count does not match {n} labels")));
    }
    let dim = if n == 0 { 1 } else { img.values.len() / n };
    Ok(RawTable {
        features: Features::new(dim.max(1), img.values)?,
        labels: lab.values.iter().map(|&v| v as i64).collect(),
    })
}
