//! Float64 reference kernels for contrastive losses and their analytic gradients.
//!
//! All similarities are cosine: rows are L2-normalized inside each loss, so
//! gradients are propagated back through the normalization.

use thiserror::Error;

pub const DEFAULT_TAU: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{role} row {row} has zero norm")]
    ZeroRow { role: &'static str, row: usize },
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("batch must have at least one row and one column")]
    Empty,
    #[error("non-finite entry at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("expected {expected} values, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("finite-difference epsilon must lie in (0, 1e-3], got {0}")]
    BadEpsilon(f64),
    #[error("{kind} takes {expected} batches, got {actual}")]
    Arity {
        kind: &'static str,
        expected: usize,
        actual: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
    Prediction,
    Projection,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Source => "source",
            Role::Target => "target",
            Role::Prediction => "prediction",
            Role::Projection => "projection",
        }
    }
}

/// Row-major N x F float64 features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    role: Role,
}

impl FeatureBatch {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, role: Role) -> Result<Self, LossError> {
        if rows == 0 || cols == 0 {
            return Err(LossError::Empty);
        }
        if data.len() != rows * cols {
            return Err(LossError::Length {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(LossError::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            role,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], role: Role) -> Result<Self, LossError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LossError::Length {
                expected: cols,
                actual: rows.iter().map(Vec::len).find(|&l| l != cols).unwrap_or(0),
            });
        }
        Self::new(rows.len(), cols, rows.concat(), role)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn with_data(&self, data: Vec<f64>) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data,
            role: self.role,
        }
    }

    fn zeros_like(&self) -> Self {
        self.with_data(vec![0.0; self.data.len()])
    }
}

/// Positive, finite temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self, LossError> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(LossError::BadTemperature(tau))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(DEFAULT_TAU)
    }
}

fn same_shape(a: &FeatureBatch, b: &FeatureBatch) -> Result<(), LossError> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Unit rows and the original norms.
struct Normalized {
    unit: Vec<f64>,
    norms: Vec<f64>,
    cols: usize,
}

impl Normalized {
    fn of(batch: &FeatureBatch) -> Result<Self, LossError> {
        let mut unit = Vec::with_capacity(batch.data.len());
        let mut norms = Vec::with_capacity(batch.rows);
        for i in 0..batch.rows {
            let row = batch.row(i);
            let norm = dot(row, row).sqrt();
            if norm == 0.0 {
                return Err(LossError::ZeroRow {
                    role: batch.role.name(),
                    row: i,
                });
            }
            unit.extend(row.iter().map(|v| v / norm));
            norms.push(norm);
        }
        Ok(Self {
            unit,
            norms,
            cols: batch.cols,
        })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.unit[i * self.cols..(i + 1) * self.cols]
    }

    /// Pulls a gradient w.r.t. the unit rows back to the raw rows:
    /// dx = (g - (g . u) u) / |x|.
    fn backprop(&self, grad_unit: &mut [f64]) {
        for (i, norm) in self.norms.iter().enumerate() {
            let u = self.row(i);
            let g = &mut grad_unit[i * self.cols..(i + 1) * self.cols];
            let along = dot(g, u);
            for (gj, uj) in g.iter_mut().zip(u) {
                *gj = (*gj - along * uj) / norm;
            }
        }
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Loss plus gradients w.r.t. source and target batches.
fn infonce_impl(
    zs: &FeatureBatch,
    zt: &FeatureBatch,
    tau: Temperature,
    want_grad: bool,
) -> Result<(f64, Option<(Vec<f64>, Vec<f64>)>), LossError> {
    same_shape(zs, zt)?;
    let s = Normalized::of(zs)?;
    let t = Normalized::of(zt)?;
    let (n, f) = zs.shape();
    let inv_tau = 1.0 / tau.value();
    let mut loss = 0.0;
    let mut grads = want_grad.then(|| (vec![0.0; n * f], vec![0.0; n * f]));
    let mut logits = vec![0.0; n];
    for i in 0..n {
        for (k, l) in logits.iter_mut().enumerate() {
            *l = dot(s.row(i), t.row(k)) * inv_tau;
        }
        let lse = log_sum_exp(&logits);
        loss += lse - logits[i];
        if let Some((gs, gt)) = grads.as_mut() {
            // d loss_i / d logit_k = softmax_k - [k == i], scaled by 1/N for the mean.
            for (k, &logit) in logits.iter().enumerate() {
                let p = (logit - lse).exp();
                let coef = (p - if k == i { 1.0 } else { 0.0 }) * inv_tau / n as f64;
                let (si, tk) = (s.row(i), t.row(k));
                for j in 0..f {
                    gs[i * f + j] += coef * tk[j];
                    gt[k * f + j] += coef * si[j];
                }
            }
        }
    }
    if let Some((gs, gt)) = grads.as_mut() {
        s.backprop(gs);
        t.backprop(gt);
    }
    Ok((loss / n as f64, grads))
}

/// One-directional InfoNCE: mean over i of
/// `-log softmax_k(cos(zs_i, zt_k) / tau)[i]`, negatives drawn from the target side.
pub fn infonce(zs: &FeatureBatch, zt: &FeatureBatch, tau: Temperature) -> Result<f64, LossError> {
    infonce_impl(zs, zt, tau, false).map(|(loss, _)| loss)
}

/// Analytic gradients of [`infonce`] w.r.t. `zs` and `zt`.
pub fn grad_infonce(
    zs: &FeatureBatch,
    zt: &FeatureBatch,
    tau: Temperature,
) -> Result<(FeatureBatch, FeatureBatch), LossError> {
    let (_, grads) = infonce_impl(zs, zt, tau, true)?;
    let (gs, gt) = grads.expect("gradients requested");
    Ok((zs.with_data(gs), zt.with_data(gt)))
}

/// Symmetric image/text form: the average of both InfoNCE directions.
pub fn clip_symmetric(
    z_img: &FeatureBatch,
    z_txt: &FeatureBatch,
    tau: Temperature,
) -> Result<f64, LossError> {
    let forward = infonce(z_img, z_txt, tau)?;
    let backward = infonce(z_txt, z_img, tau)?;
    // Summed in a fixed operand order so that swapping the arguments is exact.
    let (lo, hi) = if forward <= backward {
        (forward, backward)
    } else {
        (backward, forward)
    };
    Ok((lo + hi) / 2.0)
}

pub fn grad_clip_symmetric(
    z_img: &FeatureBatch,
    z_txt: &FeatureBatch,
    tau: Temperature,
) -> Result<(FeatureBatch, FeatureBatch), LossError> {
    let (gi_fwd, gt_fwd) = grad_infonce(z_img, z_txt, tau)?;
    let (gt_bwd, gi_bwd) = grad_infonce(z_txt, z_img, tau)?;
    let avg = |a: &FeatureBatch, b: &FeatureBatch| {
        a.with_data(a.data.iter().zip(&b.data).map(|(x, y)| (x + y) / 2.0).collect())
    };
    Ok((avg(&gi_fwd, &gi_bwd), avg(&gt_fwd, &gt_bwd)))
}

/// Negative mean row-wise cosine.
fn neg_cosine(p: &FeatureBatch, z: &FeatureBatch) -> Result<f64, LossError> {
    same_shape(p, z)?;
    let pn = Normalized::of(p)?;
    let zn = Normalized::of(z)?;
    let n = p.rows;
    let total: f64 = (0..n).map(|i| dot(pn.row(i), zn.row(i))).sum();
    Ok(-total / n as f64)
}

/// Gradient of `neg_cosine(p, z)` w.r.t. `p` with `z` held constant.
fn grad_neg_cosine(p: &FeatureBatch, z: &FeatureBatch, scale: f64) -> Result<FeatureBatch, LossError> {
    same_shape(p, z)?;
    let pn = Normalized::of(p)?;
    let zn = Normalized::of(z)?;
    let n = p.rows;
    let mut g: Vec<f64> = zn.unit.iter().map(|v| -scale * v / n as f64).collect();
    pn.backprop(&mut g);
    Ok(p.with_data(g))
}

/// Negative-free siamese loss: `D(p1, z2)/2 + D(p2, z1)/2` with
/// `D(p, z) = -mean_i cos(p_i, z_i)`.
pub fn simsiam_loss(
    p1: &FeatureBatch,
    p2: &FeatureBatch,
    z1: &FeatureBatch,
    z2: &FeatureBatch,
) -> Result<f64, LossError> {
    same_shape(p1, p2)?;
    same_shape(z1, z2)?;
    Ok(0.5 * neg_cosine(p1, z2)? + 0.5 * neg_cosine(p2, z1)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSiamGrads {
    pub p1: FeatureBatch,
    pub p2: FeatureBatch,
    /// Always zero: the projection branch sits behind a stop-gradient.
    pub z1: FeatureBatch,
    pub z2: FeatureBatch,
}

pub fn grad_simsiam(
    p1: &FeatureBatch,
    p2: &FeatureBatch,
    z1: &FeatureBatch,
    z2: &FeatureBatch,
) -> Result<SimSiamGrads, LossError> {
    same_shape(p1, p2)?;
    same_shape(z1, z2)?;
    Ok(SimSiamGrads {
        p1: grad_neg_cosine(p1, z2, 0.5)?,
        p2: grad_neg_cosine(p2, z1, 0.5)?,
        z1: z1.zeros_like(),
        z2: z2.zeros_like(),
    })
}

/// Max relative error between `analytic` and a central-difference gradient of `f` at `x`.
///
/// Each coordinate's error is normalized by `max(|analytic|, |numeric|, 1e-12)`.
pub fn fd_check<F>(f: F, x: &[f64], analytic: &[f64], epsilon: f64) -> Result<f64, LossError>
where
    F: Fn(&[f64]) -> f64,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(LossError::BadEpsilon(epsilon));
    }
    if analytic.len() != x.len() {
        return Err(LossError::Length {
            expected: x.len(),
            actual: analytic.len(),
        });
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for j in 0..x.len() {
        probe[j] = x[j] + epsilon;
        let up = f(&probe);
        probe[j] = x[j] - epsilon;
        let down = f(&probe);
        probe[j] = x[j];
        let numeric = (up - down) / (2.0 * epsilon);
        let scale = analytic[j].abs().max(numeric.abs()).max(1e-12);
        worst = worst.max((analytic[j] - numeric).abs() / scale);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    InfoNce,
    ClipSymmetric,
    SimSiam,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::InfoNce => "infonce",
            LossKind::ClipSymmetric => "clip_symmetric",
            LossKind::SimSiam => "simsiam",
        }
    }

    fn arity(self) -> usize {
        match self {
            LossKind::InfoNce | LossKind::ClipSymmetric => 2,
            LossKind::SimSiam => 4,
        }
    }

    /// Inputs that receive gradient; SimSiam's projections do not.
    fn differentiable(self) -> usize {
        2
    }

    fn value(self, inputs: &[FeatureBatch], tau: Temperature) -> Result<f64, LossError> {
        match self {
            LossKind::InfoNce => infonce(&inputs[0], &inputs[1], tau),
            LossKind::ClipSymmetric => clip_symmetric(&inputs[0], &inputs[1], tau),
            LossKind::SimSiam => simsiam_loss(&inputs[0], &inputs[1], &inputs[2], &inputs[3]),
        }
    }

    fn gradient(self, inputs: &[FeatureBatch], tau: Temperature) -> Result<Vec<FeatureBatch>, LossError> {
        Ok(match self {
            LossKind::InfoNce => {
                let (a, b) = grad_infonce(&inputs[0], &inputs[1], tau)?;
                vec![a, b]
            }
            LossKind::ClipSymmetric => {
                let (a, b) = grad_clip_symmetric(&inputs[0], &inputs[1], tau)?;
                vec![a, b]
            }
            LossKind::SimSiam => {
                let g = grad_simsiam(&inputs[0], &inputs[1], &inputs[2], &inputs[3])?;
                vec![g.p1, g.p2]
            }
        })
    }
}

/// Finite-difference check of a named loss over its differentiable inputs.
///
/// Inputs are ordered `[zs, zt]` for the contrastive losses and
/// `[p1, p2, z1, z2]` for SimSiam (only `p1`, `p2` are checked).
pub fn fd_check_loss(
    kind: LossKind,
    inputs: &[FeatureBatch],
    tau: Temperature,
    epsilon: f64,
) -> Result<f64, LossError> {
    if inputs.len() != kind.arity() {
        return Err(LossError::Arity {
            kind: kind.name(),
            expected: kind.arity(),
            actual: inputs.len(),
        });
    }
    // Validate once so the closure below can unwrap.
    kind.value(inputs, tau)?;
    let grads = kind.gradient(inputs, tau)?;
    let sizes: Vec<usize> = inputs[..kind.differentiable()]
        .iter()
        .map(|b| b.data.len())
        .collect();
    let x: Vec<f64> = inputs[..kind.differentiable()]
        .iter()
        .flat_map(|b| b.data.iter().copied())
        .collect();
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data.iter().copied()).collect();
    let eval = |flat: &[f64]| {
        let mut probe = inputs.to_vec();
        let mut offset = 0;
        for (b, &len) in probe.iter_mut().zip(&sizes) {
            b.data.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        kind.value(&probe, tau).unwrap_or(f64::NAN)
    };
    fd_check(eval, &x, &analytic, epsilon)
}
