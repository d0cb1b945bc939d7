//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LbfgsConfig {
    /// Number of (s, y) correction pairs kept.
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once the gradient's max-norm falls to this value.
    pub gradient_tolerance: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo_c1: f64,
    /// Step halvings allowed per line search.
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            armijo_c1: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// Gradient max-norm reached the tolerance.
    Converged,
    MaxIterations,
    /// No step satisfying the Armijo condition was found.
    LineSearchFailed,
    /// The objective returned a non-finite value or gradient at the start point.
    NonFiniteStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_max_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective value after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

impl LbfgsResult {
    pub fn converged(&self) -> bool {
        self.termination == Termination::Converged
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

struct Correction {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: returns `-H g` for the implicit inverse-Hessian estimate.
fn search_direction(history: &VecDeque<Correction>, g: &[f64]) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alpha = vec![0.0; history.len()];
    for (i, c) in history.iter().enumerate().rev() {
        alpha[i] = c.rho * dot(&c.s, &q);
        for (qj, yj) in q.iter_mut().zip(&c.y) {
            *qj -= alpha[i] * yj;
        }
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (i, c) in history.iter().enumerate() {
        let beta = c.rho * dot(&c.y, &q);
        for (qj, sj) in q.iter_mut().zip(&c.s) {
            *qj += (alpha[i] - beta) * sj;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Minimizes `objective`, which returns `(value, gradient)` at a point.
///
/// Accepted steps always satisfy the Armijo condition, so the objective
/// decreases monotonically and the final iterate is the best one seen.
pub fn lbfgs_minimize<F>(mut objective: F, x0: &[f64], config: &LbfgsConfig) -> LbfgsResult
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let mut x = x0.to_vec();
    let (mut f, mut g) = objective(&x);
    let result = |x: Vec<f64>, f: f64, g: &[f64], iterations, termination, trace| LbfgsResult {
        x,
        value: f,
        gradient_max_norm: max_norm(g),
        iterations,
        termination,
        trace,
    };
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return result(x, f, &g, 0, Termination::NonFiniteStart, vec![f]);
    }
    let mut trace = vec![f];
    let mut history: VecDeque<Correction> = VecDeque::with_capacity(config.memory);
    if max_norm(&g) <= config.gradient_tolerance {
        return result(x, f, &g, 0, Termination::Converged, trace);
    }
    let mut x_new = vec![0.0; x.len()];
    for iteration in 0..config.max_iterations {
        let mut d = search_direction(&history, &g);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut step = if history.is_empty() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            for ((xn, xi), di) in x_new.iter_mut().zip(&x).zip(&d) {
                *xn = xi + step * di;
            }
            let (f_try, g_try) = objective(&x_new);
            if f_try.is_finite() && f_try <= f + config.armijo_c1 * step * slope {
                accepted = Some((f_try, g_try));
                break;
            }
            step *= 0.5;
        }
        let Some((f_next, g_next)) = accepted else {
            return result(x, f, &g, iteration, Termination::LineSearchFailed, trace);
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_next.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back(Correction { s, y, rho: 1.0 / sy });
        }
        std::mem::swap(&mut x, &mut x_new);
        f = f_next;
        g = g_next;
        trace.push(f);
        if max_norm(&g) <= config.gradient_tolerance {
            return result(x, f, &g, iteration + 1, Termination::Converged, trace);
        }
    }
    result(x, f, &g, config.max_iterations, Termination::MaxIterations, trace)
}
