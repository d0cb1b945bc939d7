//! Labeled frozen-feature sets and the `id,label,split` CSV that annotates them.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::embedstore::EmbeddingMatrix;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("labels line {line}: {message}")]
    Line { line: u64, message: String },
    #[error("record {0:?} has no label")]
    Unlabeled(String),
    #[error("labels line {line}: id {id:?} not present in the feature file")]
    UnknownId { line: u64, id: String },
    #[error("labels line {line}: id {id:?} labeled twice")]
    Duplicate { line: u64, id: String },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelRange { label: usize, n_classes: usize },
    #[error("expected {expected} {what}, found {actual}")]
    Length {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split tag {other:?} (expected train, val or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Frozen features with a class index and split tag per record.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureSet {
    dim: usize,
    features: Vec<f32>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    n_classes: usize,
    class_names: Option<Vec<String>>,
}

impl LabeledFeatureSet {
    pub fn new(
        dim: usize,
        features: Vec<f32>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self, LabelError> {
        let n = labels.len();
        if features.len() != n * dim {
            return Err(LabelError::Length {
                what: "feature entries",
                expected: n * dim,
                actual: features.len(),
            });
        }
        if splits.len() != n {
            return Err(LabelError::Length {
                what: "split tags",
                expected: n,
                actual: splits.len(),
            });
        }
        let n_classes = match &class_names {
            Some(names) => names.len(),
            None => labels.iter().max().map_or(0, |m| m + 1),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(LabelError::LabelRange {
                label: bad,
                n_classes,
            });
        }
        Ok(Self {
            dim,
            features,
            labels,
            splits,
            n_classes,
            class_names,
        })
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

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Indices of records tagged `split`, in record order.
    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Records at `rows` as a new set sharing the class space.
    pub fn subset(&self, rows: &[usize]) -> LabeledFeatureSet {
        let mut features = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        LabeledFeatureSet {
            dim: self.dim,
            features,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            splits: rows.iter().map(|&r| self.splits[r]).collect(),
            n_classes: self.n_classes,
            class_names: self.class_names.clone(),
        }
    }

    pub fn split(&self, split: Split) -> LabeledFeatureSet {
        self.subset(&self.rows_in(split))
    }
}

/// One parsed row of the labels CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRow {
    pub line: u64,
    pub id: String,
    pub label: String,
    pub split: Split,
}

/// Parses `id,label,split` rows (header required).
pub fn read_labels_csv<R: Read>(input: R) -> Result<Vec<LabelRow>, LabelError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = reader.headers()?.clone();
    let expected = ["id", "label", "split"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h.trim() != e) {
        return Err(LabelError::Line {
            line: 1,
            message: format!("expected header id,label,split, found {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let split = record[2]
            .trim()
            .parse::<Split>()
            .map_err(|message| LabelError::Line { line, message })?;
        rows.push(LabelRow {
            line,
            id: record[0].to_owned(),
            label: record[1].trim().to_owned(),
            split,
        });
    }
    Ok(rows)
}

/// Joins a feature matrix with label rows by id.
///
/// Integer labels are used as class indices directly; otherwise classes are
/// the distinct label strings in sorted order.
pub fn join_labels(matrix: &EmbeddingMatrix, rows: &[LabelRow]) -> Result<LabeledFeatureSet, LabelError> {
    let index = matrix.id_index();
    let mut by_row: Vec<Option<&LabelRow>> = vec![None; matrix.len()];
    for row in rows {
        let &r = index.get(row.id.as_str()).ok_or_else(|| LabelError::UnknownId {
            line: row.line,
            id: row.id.clone(),
        })?;
        if by_row[r].replace(row).is_some() {
            return Err(LabelError::Duplicate {
                line: row.line,
                id: row.id.clone(),
            });
        }
    }
    let numeric = rows.iter().all(|r| r.label.parse::<usize>().is_ok());
    let class_names: Option<Vec<String>> = (!numeric).then(|| {
        rows.iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    });
    let name_index: HashMap<&str, usize> = class_names
        .iter()
        .flatten()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut labels = Vec::with_capacity(matrix.len());
    let mut splits = Vec::with_capacity(matrix.len());
    for (r, entry) in by_row.iter().enumerate() {
        let entry = entry.ok_or_else(|| LabelError::Unlabeled(matrix.id(r).to_owned()))?;
        labels.push(if numeric {
            entry.label.parse::<usize>().expect("checked numeric")
        } else {
            name_index[entry.label.as_str()]
        });
        splits.push(entry.split);
    }
    LabeledFeatureSet::new(
        matrix.dim(),
        matrix.as_slice().to_vec(),
        labels,
        splits,
        class_names,
    )
}
