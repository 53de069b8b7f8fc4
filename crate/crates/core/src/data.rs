//! Dataset loading, splitting and the vertical feature partition.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

const DIGITS_CSV: &str = include_str!("../data/digits.csv");

/// Standard deviations below this are treated as this value.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: DenseTensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: DenseTensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::shape("Dataset labels", features.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidConfig(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Dataset {
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

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Row indices grouped by class, ascending.
    pub fn class_rows(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in self.labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        by_class
    }
}

/// CSV layout: a header row, one integer label column, every other column a
/// numeric feature.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    #[serde(default = "default_label_column")]
    pub label_column: String,
    /// Labels at or above this are rejected. Inferred from the data when unset.
    #[serde(default)]
    pub num_classes: Option<usize>,
}

fn default_label_column() -> String {
    "label".into()
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            label_column: default_label_column(),
            num_classes: None,
        }
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let label_at = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("no label column named {:?}", schema.label_column),
        })?;
    let d = headers.len() - 1;
    if d == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no feature columns".into(),
        });
    }

    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            if j == label_at {
                let y: usize = cell.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("label {cell:?} is not a class index"),
                })?;
                if schema.num_classes.is_some_and(|c| y >= c) {
                    return Err(Error::Parse {
                        line,
                        message: format!("unknown label {y}"),
                    });
                }
                labels.push(y);
            } else {
                let x: f64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("column {:?}: {cell:?} is not numeric", &headers[j]),
                })?;
                if !x.is_finite() {
                    return Err(Error::Parse {
                        line,
                        message: format!("column {:?}: non-finite value", &headers[j]),
                    });
                }
                data.push(x);
            }
        }
    }
    let n = labels.len();
    let num_classes = schema
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(DenseTensor::from_vec(n, d, data)?, labels, num_classes)
}

/// The bundled 8×8 handwritten digits corpus: 1797 rows, 64 features, 10
/// classes.
pub fn digits() -> Result<Dataset> {
    read_csv(
        DIGITS_CSV.as_bytes(),
        &CsvSchema {
            label_column: "label".into(),
            num_classes: Some(10),
        },
    )
}

/// Isotropic Gaussian blobs with class centres drawn from `N(0, 1)` per
/// coordinate and within-class spread `spread`. Labels cycle through classes.
pub fn blobs<R: RngCore + ?Sized>(n: usize, d: usize, classes: usize, spread: f64, rng: &mut R) -> Result<Dataset> {
    if classes == 0 || d == 0 {
        return Err(Error::InvalidConfig(
            "blobs need at least one class and one feature".into(),
        ));
    }
    let noise = Normal::new(0.0, spread).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let centres = DenseTensor::from_fn(classes, d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let features = DenseTensor::from_fn(n, d, |i, j| centres.get(labels[i], j) + noise.sample(rng));
    Dataset::new(features, labels, classes)
}

/// Random train/test partition; each side keeps the original row order.
pub fn train_test_split<R: RngCore + ?Sized>(
    ds: &Dataset,
    test_fraction: f64,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidConfig(format!("test fraction {test_fraction}")));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(rng);
    let n_test = (ds.len() as f64 * test_fraction).round() as usize;
    let (test, train) = order.split_at(n_test);
    let (mut train, mut test) = (train.to_vec(), test.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.select(&train), ds.select(&test)))
}

/// Per-column standardization fitted on training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DenseTensor) -> Self {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        let mut std = vec![STD_FLOOR; d];
        if n == 0 {
            return Standardizer { mean, std };
        }
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for (j, s) in std.iter_mut().enumerate() {
            let var = (0..n).map(|i| (x.get(i, j) - mean[j]).powi(2)).sum::<f64>() / n as f64;
            *s = var.sqrt().max(STD_FLOOR);
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &DenseTensor) -> Result<DenseTensor> {
        if x.cols() != self.mean.len() {
            return Err(Error::shape("Standardizer::apply", self.mean.len(), x.cols()));
        }
        Ok(DenseTensor::from_fn(x.rows(), x.cols(), |i, j| {
            (x.get(i, j) - self.mean[j]) / self.std[j]
        }))
    }
}

/// Column counts per party: the first `d mod k` parties get one extra column.
pub fn vertical_widths(d: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || d < k {
        return Err(Error::InvalidConfig(format!(
            "cannot split {d} features across {k} parties"
        )));
    }
    Ok((0..k).map(|i| d / k + usize::from(i < d % k)).collect())
}

/// Contiguous column blocks, one per party. The last block belongs to the
/// active party.
pub fn vertical_split(x: &DenseTensor, k: usize) -> Result<Vec<DenseTensor>> {
    let widths = vertical_widths(x.cols(), k)?;
    let mut start = 0;
    let mut blocks = Vec::with_capacity(k);
    for w in widths {
        blocks.push(x.column_block(start, start + w));
        start += w;
    }
    Ok(blocks)
}

/// How the active party's auxiliary data is derived from the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxSpec {
    /// Fraction of each class kept.
    pub ratio: f64,
    /// Keep only these classes.
    pub label_subset: Option<Vec<usize>>,
    /// Std of Gaussian noise added to the auxiliary features.
    pub feature_noise: f64,
}

impl Default for AuxSpec {
    fn default() -> Self {
        AuxSpec {
            ratio: 0.05,
            label_subset: None,
            feature_noise: 0.0,
        }
    }
}

impl AuxSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::InvalidConfig(format!("aux ratio {}", self.ratio)));
        }
        if !self.feature_noise.is_finite() || self.feature_noise < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "aux feature noise {}",
                self.feature_noise
            )));
        }
        Ok(())
    }
}

/// Stratified subsample of `ds`: `ceil(ratio · n_c)` rows of each kept class,
/// returned in ascending order.
pub fn aux_rows<R: RngCore + ?Sized>(ds: &Dataset, spec: &AuxSpec, rng: &mut R) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut rows = Vec::new();
    for (class, mut members) in ds.class_rows() {
        if spec.label_subset.as_ref().is_some_and(|keep| !keep.contains(&class)) {
            continue;
        }
        members.shuffle(rng);
        let take = ((members.len() as f64 * spec.ratio).ceil() as usize).min(members.len());
        rows.extend_from_slice(&members[..take]);
    }
    if rows.is_empty() {
        return Err(Error::InvalidConfig("auxiliary dataset is empty".into()));
    }
    rows.sort_unstable();
    Ok(rows)
}

/// Adds the configured feature noise to an auxiliary block.
pub fn corrupt_features<R: RngCore + ?Sized>(x: &DenseTensor, noise: f64, rng: &mut R) -> Result<DenseTensor> {
    if noise == 0.0 {
        return Ok(x.clone());
    }
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(DenseTensor::from_fn(x.rows(), x.cols(), |i, j| {
        x.get(i, j) + normal.sample(rng)
    }))
}
