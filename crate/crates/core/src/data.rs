//! Dataset ingestion and the active-learning pool.
//!
//! A [`Dataset`] is an immutable, row-major feature matrix with binary labels.
//! A [`Pool`] partitions the dataset's row indices into a labeled set, an
//! unlabeled query pool and a held-out test set.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("label column {0} not found")]
    MissingLabelColumn(String),
    #[error("non-numeric feature at row {row}, column {column}: {value:?}")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("row {row} has {found} fields, expected {expected}")]
    RaggedRow {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("dataset has no rows")]
    Empty,
    #[error("need exactly 2 classes, found {0}")]
    ClassCount(usize),
    #[error("classes must be distinct")]
    SameClasses,
    #[error("class {0:?} not present in labels")]
    MissingClass(String),
    #[error("class {class} has {available} training examples, need {needed}")]
    InsufficientClass {
        class: u8,
        available: usize,
        needed: usize,
    },
    #[error("train fraction must lie in (0, 1], got {0}")]
    TrainFraction(f64),
    #[error("index {0} is not in the unlabeled set")]
    NotUnlabeled(usize),
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(u8),
}

/// Selects the label column of a CSV file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
    /// The right-most column.
    Last,
}

impl std::str::FromStr for LabelColumn {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "last" => LabelColumn::Last,
            _ => match s.parse::<usize>() {
                Ok(i) => LabelColumn::Index(i),
                Err(_) => LabelColumn::Name(s.to_string()),
            },
        })
    }
}

/// A numeric table whose labels are still raw strings, possibly multiclass.
#[derive(Debug, Clone)]
pub struct RawDataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<String>,
    names: Vec<String>,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Distinct raw label values, sorted.
    pub fn classes(&self) -> Vec<String> {
        self.labels
            .iter()
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Maps a two-class table onto {0, 1}; the lexicographically smaller raw
    /// label becomes class 0.
    pub fn into_binary(self) -> Result<Dataset, DataError> {
        let classes = self.classes();
        if classes.len() != 2 {
            return Err(DataError::ClassCount(classes.len()));
        }
        let labels = self
            .labels
            .iter()
            .map(|l| u8::from(*l == classes[1]))
            .collect();
        Dataset::new(
            self.features,
            self.dim,
            labels,
            Some(self.names),
            [classes[0].clone(), classes[1].clone()],
        )
    }

    /// Keeps only the rows labeled with one of the two given classes.
    pub fn filter_classes(self, keep: (&str, &str)) -> Result<Dataset, DataError> {
        if keep.0 == keep.1 {
            return Err(DataError::SameClasses);
        }
        for class in [keep.0, keep.1] {
            if !self.labels.iter().any(|l| l == class) {
                return Err(DataError::MissingClass(class.to_string()));
            }
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, label) in self.labels.iter().enumerate() {
            if label == keep.0 || label == keep.1 {
                features.extend_from_slice(&self.features[i * self.dim..(i + 1) * self.dim]);
                labels.push(label.clone());
            }
        }
        RawDataset {
            features,
            dim: self.dim,
            labels,
            names: self.names,
        }
        .into_binary()
    }
}

/// Binary classification data, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<u8>,
    names: Option<Vec<String>>,
    class_names: [String; 2],
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<u8>,
        names: Option<Vec<String>>,
        class_names: [String; 2],
    ) -> Result<Self, DataError> {
        if labels.is_empty() {
            return Err(DataError::Empty);
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::RaggedRow {
                row: features.len() / dim.max(1),
                found: features.len() % dim.max(1),
                expected: dim,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(DataError::BadLabel(bad));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonNumeric {
                row: pos / dim,
                column: (pos % dim).to_string(),
                value: features[pos].to_string(),
            });
        }
        let positives = labels.iter().filter(|&&l| l == 1).count();
        if positives == 0 || positives == labels.len() {
            return Err(DataError::ClassCount(1));
        }
        Ok(Self {
            features,
            dim,
            labels,
            names,
            class_names,
        })
    }

    /// Builds a dataset from rows of features; class names default to "0"/"1".
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<u8>) -> Result<Self, DataError> {
        let dim = rows.first().map_or(0, Vec::len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(DataError::RaggedRow {
                    row: i,
                    found: row.len(),
                    expected: dim,
                });
            }
        }
        let features = rows.iter().flatten().copied().collect();
        Self::new(features, dim, labels, None, ["0".into(), "1".into()])
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn class_names(&self) -> &[String; 2] {
        &self.class_names
    }

    /// Min-max scales every attribute onto [0, 1]. Constant attributes become 0.
    pub fn normalize(&self) -> Dataset {
        let mut out = self.clone();
        for j in 0..self.dim {
            let (lo, hi) = (0..self.len())
                .map(|i| self.features[i * self.dim + j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    (lo.min(v), hi.max(v))
                });
            let span = hi - lo;
            for i in 0..self.len() {
                let v = &mut out.features[i * self.dim + j];
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
        out
    }

    /// Writes a headered CSV with the raw class names in a trailing `label` column.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<(), DataError> {
        let mut writer = csv::Writer::from_path(path.as_ref())?;
        let mut header: Vec<String> = match &self.names {
            Some(names) => names.clone(),
            None => (0..self.dim).map(|j| format!("x{j}")).collect(),
        };
        header.push("label".to_string());
        writer.write_record(&header)?;
        for i in 0..self.len() {
            let mut record: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            record.push(self.class_names[self.labels[i] as usize].clone());
            writer.write_record(&record)?;
        }
        writer.flush().map_err(|source| DataError::Io {
            path: path.as_ref().display().to_string(),
            source,
        })?;
        Ok(())
    }
}

/// Reads a headered CSV keeping raw string labels.
pub fn load_raw_csv<P: AsRef<Path>>(path: P, label: &LabelColumn) -> Result<RawDataset, DataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let label_idx = match label {
        LabelColumn::Name(name) => header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingLabelColumn(name.clone()))?,
        LabelColumn::Index(i) if *i < header.len() => *i,
        LabelColumn::Index(i) => return Err(DataError::MissingLabelColumn(i.to_string())),
        LabelColumn::Last if !header.is_empty() => header.len() - 1,
        LabelColumn::Last => return Err(DataError::MissingLabelColumn("last".into())),
    };
    let names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let dim = names.len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(DataError::RaggedRow {
                row,
                found: record.len(),
                expected: header.len(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if j == label_idx {
                labels.push(cell.to_string());
                continue;
            }
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => features.push(v),
                _ => {
                    return Err(DataError::NonNumeric {
                        row,
                        column: header[j].clone(),
                        value: cell.to_string(),
                    })
                }
            }
        }
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(RawDataset {
        features,
        dim,
        labels,
        names,
    })
}

/// Reads a headered two-class CSV.
pub fn load_csv<P: AsRef<Path>>(path: P, label: &LabelColumn) -> Result<Dataset, DataError> {
    load_raw_csv(path, label)?.into_binary()
}

/// An example whose label is known to the learner. In simulation the label is
/// a posterior draw rather than the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledExample {
    pub index: usize,
    pub label: u8,
}

/// Partition of a dataset into labeled, unlabeled and test indices.
#[derive(Debug, Clone)]
pub struct Pool {
    dataset: Arc<Dataset>,
    labeled: Vec<LabeledExample>,
    unlabeled: Vec<usize>,
    test: Vec<usize>,
}

impl PartialEq for Pool {
    fn eq(&self, other: &Self) -> bool {
        (Arc::ptr_eq(&self.dataset, &other.dataset) || self.dataset == other.dataset)
            && self.labeled == other.labeled
            && self.unlabeled == other.unlabeled
            && self.test == other.test
    }
}

impl Pool {
    /// Builds a pool from explicit index sets; labels for `labeled` come from
    /// the dataset. `unlabeled` and `test` are stored sorted.
    pub fn from_parts(
        dataset: Arc<Dataset>,
        labeled: Vec<usize>,
        mut unlabeled: Vec<usize>,
        mut test: Vec<usize>,
    ) -> Result<Self, DataError> {
        unlabeled.sort_unstable();
        test.sort_unstable();
        let labeled = labeled
            .into_iter()
            .map(|index| LabeledExample {
                index,
                label: dataset.label(index),
            })
            .collect();
        let pool = Self {
            dataset,
            labeled,
            unlabeled,
            test,
        };
        pool.check_partition()?;
        Ok(pool)
    }

    fn check_partition(&self) -> Result<(), DataError> {
        let n = self.dataset.len();
        let mut seen = vec![false; n];
        let all = self
            .labeled
            .iter()
            .map(|e| e.index)
            .chain(self.unlabeled.iter().copied())
            .chain(self.test.iter().copied());
        for i in all {
            if i >= n || seen[i] {
                return Err(DataError::NotUnlabeled(i));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(DataError::NotUnlabeled(seen.iter().position(|s| !s).unwrap()));
        }
        for class in 0..2u8 {
            if !self.labeled.iter().any(|e| e.label == class) {
                return Err(DataError::InsufficientClass {
                    class,
                    available: 0,
                    needed: 1,
                });
            }
        }
        Ok(())
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn shared_dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn labeled(&self) -> &[LabeledExample] {
        &self.labeled
    }

    /// Unlabeled indices in ascending order.
    pub fn unlabeled(&self) -> &[usize] {
        &self.unlabeled
    }

    pub fn test(&self) -> &[usize] {
        &self.test
    }

    pub fn is_unlabeled(&self, index: usize) -> bool {
        self.unlabeled.binary_search(&index).is_ok()
    }

    /// Moves `index` from the unlabeled set to the labeled set with `label`.
    pub fn assign_label(&mut self, index: usize, label: u8) -> Result<(), DataError> {
        if label > 1 {
            return Err(DataError::BadLabel(label));
        }
        let pos = self
            .unlabeled
            .binary_search(&index)
            .map_err(|_| DataError::NotUnlabeled(index))?;
        self.unlabeled.remove(pos);
        self.labeled.push(LabeledExample { index, label });
        Ok(())
    }

    /// Queries the true labels of `indices`.
    pub fn reveal(&mut self, indices: &[usize]) -> Result<(), DataError> {
        if let Some(&bad) = indices.iter().find(|&&i| !self.is_unlabeled(i)) {
            return Err(DataError::NotUnlabeled(bad));
        }
        for &i in indices {
            let label = self.dataset.label(i);
            self.assign_label(i, label)?;
        }
        Ok(())
    }
}

/// Splits off `floor((1 - train_frac) * n)` test examples, then draws
/// `seeds_per_class` labeled examples of each class from the remainder.
pub fn split_and_init<R: Rng + ?Sized>(
    dataset: Arc<Dataset>,
    train_frac: f64,
    seeds_per_class: usize,
    rng: &mut R,
) -> Result<Pool, DataError> {
    if !(train_frac > 0.0 && train_frac <= 1.0) {
        return Err(DataError::TrainFraction(train_frac));
    }
    let n = dataset.len();
    // Guard against 0.3 * n landing a hair below an integer.
    let n_test = (((1.0 - train_frac) * n as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let test = order[..n_test].to_vec();
    let train = &order[n_test..];

    let mut labeled = Vec::with_capacity(2 * seeds_per_class);
    for class in 0..2u8 {
        let members: Vec<usize> = train
            .iter()
            .copied()
            .filter(|&i| dataset.label(i) == class)
            .collect();
        if members.len() < seeds_per_class.max(1) {
            return Err(DataError::InsufficientClass {
                class,
                available: members.len(),
                needed: seeds_per_class.max(1),
            });
        }
        labeled.extend(members.choose_multiple(rng, seeds_per_class));
    }
    let chosen: BTreeSet<usize> = labeled.iter().copied().collect();
    let unlabeled = train.iter().copied().filter(|i| !chosen.contains(i)).collect();
    Pool::from_parts(dataset, labeled, unlabeled, test)
}
