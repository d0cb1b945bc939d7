//! Multinomial logistic regression objective.
//!
//! Weights are a row-major (F + 1) x C matrix whose last row holds the class
//! biases. The objective is the summed cross-entropy plus
//! `||W_features||_F^2 / (2 * cost)`; the bias row is not penalized.

use super::ProbeError;

/// Row-major design matrix with class indices in `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRegData {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub n_classes: usize,
}

impl LogRegData {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, n_classes: usize) -> Result<Self, ProbeError> {
        if features.len() != labels.len() * dim {
            return Err(ProbeError::Shape(format!(
                "{} feature entries for {} records of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(ProbeError::NonFinite { row: pos / dim, col: pos % dim });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(ProbeError::Shape(format!("label {bad} outside {n_classes} classes")));
        }
        Ok(Self { features, labels, dim, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn n_weights(&self) -> usize {
        (self.dim + 1) * self.n_classes
    }
}

/// Class scores `x W + b` for one record.
pub(crate) fn logits(weights: &[f64], x: &[f64], n_classes: usize, out: &mut [f64]) {
    let dim = x.len();
    out.copy_from_slice(&weights[dim * n_classes..(dim + 1) * n_classes]);
    for (f, &xf) in x.iter().enumerate() {
        let row = &weights[f * n_classes..(f + 1) * n_classes];
        for (o, w) in out.iter_mut().zip(row) {
            *o += xf * w;
        }
    }
}

/// Loss and exact gradient at `weights`.
pub fn logreg_objective(weights: &[f64], data: &LogRegData, cost: f64) -> Result<(f64, Vec<f64>), ProbeError> {
    if !(cost > 0.0) {
        return Err(ProbeError::BadCost(cost));
    }
    if weights.len() != data.n_weights() {
        return Err(ProbeError::Shape(format!(
            "{} weights, expected {}",
            weights.len(),
            data.n_weights()
        )));
    }
    Ok(objective_unchecked(weights, data, cost))
}

pub(crate) fn objective_unchecked(weights: &[f64], data: &LogRegData, cost: f64) -> (f64, Vec<f64>) {
    let (dim, c) = (data.dim, data.n_classes);
    let mut grad = vec![0.0; weights.len()];
    let mut z = vec![0.0; c];
    let mut loss = 0.0;
    for i in 0..data.len() {
        let x = data.row(i);
        let y = data.labels[i];
        logits(weights, x, c, &mut z);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - z[y];
        // z becomes softmax - onehot
        for (k, v) in z.iter_mut().enumerate() {
            *v = (*v - lse).exp() - if k == y { 1.0 } else { 0.0 };
        }
        for (f, &xf) in x.iter().enumerate() {
            let row = &mut grad[f * c..(f + 1) * c];
            for (g, r) in row.iter_mut().zip(&z) {
                *g += xf * r;
            }
        }
        for (g, r) in grad[dim * c..].iter_mut().zip(&z) {
            *g += r;
        }
    }
    let inv_cost = 1.0 / cost;
    let mut penalty = 0.0;
    for (g, w) in grad[..dim * c].iter_mut().zip(&weights[..dim * c]) {
        penalty += w * w;
        *g += inv_cost * w;
    }
    (loss + 0.5 * inv_cost * penalty, grad)
}

/// Penalty term alone, for diagnostics.
pub fn penalty_term(weights: &[f64], dim: usize, n_classes: usize, cost: f64) -> f64 {
    weights[..dim * n_classes].iter().map(|w| w * w).sum::<f64>() / (2.0 * cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lossref::fd_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(seed: u64) -> LogRegData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels = (0..10).map(|i| i % 3).collect();
        LogRegData::new(features, labels, 4, 3).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_loss() {
        let d = data(1);
        let (loss, _) = logreg_objective(&vec![0.0; d.n_weights()], &d, 1.0).unwrap();
        assert!((loss - 10.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = data(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..d.n_weights()).map(|_| rng.gen_range(-0.5..0.5)).collect();
        for cost in [0.1, 1.0, 100.0] {
            let (_, g) = logreg_objective(&w, &d, cost).unwrap();
            let err = fd_check(|p| logreg_objective(p, &d, cost).unwrap().0, &w, &g, 1e-6).unwrap();
            assert!(err < 1e-6, "cost {cost}: {err}");
        }
    }

    #[test]
    fn doubling_cost_halves_penalty() {
        let d = data(4);
        let w: Vec<f64> = (0..d.n_weights()).map(|i| (i as f64 * 0.37).sin()).collect();
        let (l1, _) = logreg_objective(&w, &d, 1.0).unwrap();
        let (l2, _) = logreg_objective(&w, &d, 2.0).unwrap();
        let p1 = penalty_term(&w, 4, 3, 1.0);
        let p2 = penalty_term(&w, 4, 3, 2.0);
        assert_eq!(p2, p1 / 2.0);
        assert!(((l1 - p1) - (l2 - p2)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(LogRegData::new(vec![f64::NAN, 1.0], vec![0], 2, 1).is_err());
        let d = data(5);
        assert!(logreg_objective(&vec![0.0; d.n_weights()], &d, 0.0).is_err());
        assert!(logreg_objective(&[0.0], &d, 1.0).is_err());
    }
}
