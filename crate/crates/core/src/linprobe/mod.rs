//! Linear-probe evaluation of frozen features.
//!
//! One logistic-regression classifier is fit per cost on the train split and
//! scored on val; the best cost (ties to the smaller) is refit on train + val
//! and scored on test.

mod lbfgs;
mod objective;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsResult, Termination};
pub use objective::{logreg_objective, penalty_term, LogRegData};

use crate::labels::LabeledFeatureSet;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("labels {labels:?} appear in {split} but not in train")]
    UnseenLabels { split: &'static str, labels: Vec<usize> },
    #[error("feature dimension mismatch: train {train}, {split} {other}")]
    DimMismatch {
        split: &'static str,
        train: usize,
        other: usize,
    },
    #[error("cost must be positive, got {0}")]
    BadCost(f64),
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("non-finite feature at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("metric of an empty prediction set")]
    EmptyMetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Accuracy,
    MeanPerClass,
}

impl std::str::FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(MetricKind::Accuracy),
            "mean-per-class" | "mean-per-cls" => Ok(MetricKind::MeanPerClass),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

/// Log-uniform grid of `points` values from `low` to `high` inclusive.
pub fn cost_grid(points: usize, low: f64, high: f64) -> Vec<f64> {
    if points == 1 {
        return vec![low];
    }
    let (a, b) = (low.log10(), high.log10());
    (0..points)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (points - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeConfig {
    pub cost_grid: Vec<f64>,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub lbfgs_memory: usize,
    pub metric: MetricKind,
    /// Z-score features with statistics of the fitting split.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            cost_grid: cost_grid(96, 1e-6, 1e6),
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            lbfgs_memory: 10,
            metric: MetricKind::Accuracy,
            standardize: false,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.cost_grid.is_empty() {
            return Err(ProbeError::Config("cost grid is empty".into()));
        }
        if self.cost_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(ProbeError::Config("costs must be positive and finite".into()));
        }
        if self.cost_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ProbeError::Config("cost grid must be strictly increasing".into()));
        }
        if self.max_iterations == 0 || self.lbfgs_memory == 0 {
            return Err(ProbeError::Config("max_iterations and lbfgs_memory must be >= 1".into()));
        }
        Ok(())
    }

    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig {
            memory: self.lbfgs_memory,
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            ..LbfgsConfig::default()
        }
    }
}

/// A fitted classifier: (F + 1) x C weights, bias last.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub weights: Vec<f64>,
    pub dim: usize,
    pub n_classes: usize,
    pub iterations: usize,
    pub termination: Termination,
    pub loss: f64,
}

impl Fit {
    /// Frobenius norm of the non-bias weights.
    pub fn feature_weight_norm(&self) -> f64 {
        self.weights[..self.dim * self.n_classes]
            .iter()
            .map(|w| w * w)
            .sum::<f64>()
            .sqrt()
    }

    /// Argmax class per row; ties go to the smaller class.
    pub fn predict(&self, features: &[f64]) -> Vec<usize> {
        let mut z = vec![0.0; self.n_classes];
        features
            .chunks_exact(self.dim)
            .map(|x| {
                objective::logits(&self.weights, x, self.n_classes, &mut z);
                let mut best = 0;
                for (k, &v) in z.iter().enumerate().skip(1) {
                    if v > z[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// Fits from W = 0.
pub fn fit(data: &LogRegData, cost: f64, config: &LbfgsConfig) -> Result<Fit, ProbeError> {
    fit_from(data, cost, config, &vec![0.0; data.n_weights()])
}

pub fn fit_from(data: &LogRegData, cost: f64, config: &LbfgsConfig, w0: &[f64]) -> Result<Fit, ProbeError> {
    if !(cost > 0.0) {
        return Err(ProbeError::BadCost(cost));
    }
    if w0.len() != data.n_weights() {
        return Err(ProbeError::Shape(format!("{} initial weights, expected {}", w0.len(), data.n_weights())));
    }
    let r = lbfgs_minimize(|w| objective::objective_unchecked(w, data, cost), w0, config);
    Ok(Fit {
        weights: r.x,
        dim: data.dim,
        n_classes: data.n_classes,
        iterations: r.iterations,
        termination: r.termination,
        loss: r.value,
    })
}

/// Accuracy or unweighted mean of per-class recall over classes present in `labels`.
pub fn compute_metric(predictions: &[usize], labels: &[usize], kind: MetricKind) -> Result<f64, ProbeError> {
    if predictions.len() != labels.len() {
        return Err(ProbeError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(ProbeError::EmptyMetric);
    }
    match kind {
        MetricKind::Accuracy => {
            let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
            Ok(correct as f64 / labels.len() as f64)
        }
        MetricKind::MeanPerClass => {
            let n_classes = labels.iter().max().map_or(0, |m| m + 1);
            let mut total = vec![0usize; n_classes];
            let mut hit = vec![0usize; n_classes];
            for (&p, &l) in predictions.iter().zip(labels) {
                total[l] += 1;
                if p == l {
                    hit[l] += 1;
                }
            }
            let recalls: Vec<f64> = total
                .iter()
                .zip(&hit)
                .filter(|(&t, _)| t > 0)
                .map(|(&t, &h)| h as f64 / t as f64)
                .collect();
            Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostResult {
    pub cost: f64,
    pub val_metric: f64,
    pub iterations: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub metric: MetricKind,
    pub per_cost: Vec<CostResult>,
    pub best_cost: f64,
    pub best_val_metric: f64,
    pub test_metric: f64,
    pub final_iterations: usize,
    pub final_termination: Termination,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

/// Train-split statistics used to z-score features.
struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(features: &[f64], dim: usize) -> Self {
        let n = (features.len() / dim) as f64;
        let mut mean = vec![0.0; dim];
        for row in features.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in features.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, features: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        features
            .chunks_exact(dim)
            .flat_map(|row| {
                row.iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), s)| (v - m) * s)
            })
            .collect()
    }
}

fn widen(set: &LabeledFeatureSet) -> Vec<f64> {
    set.features().iter().map(|&v| f64::from(v)).collect()
}

/// Cost sweep on train/val, refit on train + val at the best cost, score on test.
pub fn sweep_and_fit(
    train: &LabeledFeatureSet,
    val: &LabeledFeatureSet,
    test: &LabeledFeatureSet,
    config: &ProbeConfig,
) -> Result<ProbeReport, ProbeError> {
    config.validate()?;
    for (name, split) in [("train", train), ("val", val), ("test", test)] {
        if split.is_empty() {
            return Err(ProbeError::EmptySplit(name));
        }
        if split.dim() != train.dim() {
            return Err(ProbeError::DimMismatch {
                split: name,
                train: train.dim(),
                other: split.dim(),
            });
        }
    }
    // Compact class space over the labels seen in train.
    let classes: Vec<usize> = train.labels().iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let mut to_local = vec![usize::MAX; train.n_classes().max(val.n_classes()).max(test.n_classes())];
    for (local, &c) in classes.iter().enumerate() {
        to_local[c] = local;
    }
    let localize = |name: &'static str, set: &LabeledFeatureSet| -> Result<Vec<usize>, ProbeError> {
        let unseen: BTreeSet<usize> = set.labels().iter().copied().filter(|&l| to_local[l] == usize::MAX).collect();
        if !unseen.is_empty() {
            return Err(ProbeError::UnseenLabels {
                split: name,
                labels: unseen.into_iter().collect(),
            });
        }
        Ok(set.labels().iter().map(|&l| to_local[l]).collect())
    };
    let (y_train, y_val, y_test) = (
        localize("train", train)?,
        localize("val", val)?,
        localize("test", test)?,
    );
    let dim = train.dim();
    let n_classes = classes.len();
    let (x_train, x_val, x_test) = (widen(train), widen(val), widen(test));
    let lbfgs = config.lbfgs();

    let (sweep_train, sweep_val) = if config.standardize {
        let s = Standardizer::fit(&x_train, dim);
        (s.apply(&x_train), s.apply(&x_val))
    } else {
        (x_train.clone(), x_val.clone())
    };
    let data = LogRegData::new(sweep_train, y_train.clone(), dim, n_classes)?;
    let per_cost: Vec<CostResult> = config
        .cost_grid
        .par_iter()
        .map(|&cost| {
            let f = fit(&data, cost, &lbfgs)?;
            let val_metric = compute_metric(&f.predict(&sweep_val), &y_val, config.metric)?;
            Ok(CostResult {
                cost,
                val_metric,
                iterations: f.iterations,
                termination: f.termination,
            })
        })
        .collect::<Result<_, ProbeError>>()?;
    let mut best = 0;
    for (i, r) in per_cost.iter().enumerate() {
        if r.val_metric > per_cost[best].val_metric {
            best = i;
        }
    }
    let best_cost = per_cost[best].cost;

    let mut x_all = x_train;
    x_all.extend_from_slice(&x_val);
    let mut y_all = y_train;
    y_all.extend_from_slice(&y_val);
    let (x_all, x_test) = if config.standardize {
        let s = Standardizer::fit(&x_all, dim);
        (s.apply(&x_all), s.apply(&x_test))
    } else {
        (x_all, x_test)
    };
    let final_fit = fit(&LogRegData::new(x_all, y_all, dim, n_classes)?, best_cost, &lbfgs)?;
    let test_metric = compute_metric(&final_fit.predict(&x_test), &y_test, config.metric)?;
    Ok(ProbeReport {
        metric: config.metric,
        best_cost,
        best_val_metric: per_cost[best].val_metric,
        per_cost,
        test_metric,
        final_iterations: final_fit.iterations,
        final_termination: final_fit.termination,
        n_classes,
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
    })
}
