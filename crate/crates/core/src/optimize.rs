//! Bound-constrained ascent for smooth concave objectives.
//!
//! Each iteration takes a Newton step on the free variables (those not held
//! at a bound by an outward gradient), projects it back onto the box and
//! backtracks until the Armijo condition holds. When the Newton direction
//! fails to ascend the projected gradient is used instead.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AscentOptions {
    /// Stop when the projected gradient's infinity norm drops below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Stop when an accepted step moves no coordinate by more than this.
    pub min_step: f64,
    pub armijo: f64,
    pub shrink: f64,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            min_step: 1e-12,
            armijo: 1e-4,
            shrink: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AscentResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub projected_gradient_norm: f64,
    pub converged: bool,
}

/// Value, gradient and Hessian of the objective at a point.
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
}

const BOUND_EPS: f64 = 0.0;
const MAX_BACKTRACKS: usize = 80;

fn projected_gradient(x: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&xi, &gi), (&lo, &hi))| {
            if (xi <= lo + BOUND_EPS && gi < 0.0) || (xi >= hi - BOUND_EPS && gi > 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((xi, &lo), &hi) in x.iter_mut().zip(lower).zip(upper) {
        *xi = xi.clamp(lo, hi);
    }
}

/// Newton ascent direction on the free coordinates, zero elsewhere.
fn newton_direction(eval: &Evaluation, free: &[usize], n: usize) -> Option<Vec<f64>> {
    if free.is_empty() {
        return None;
    }
    let k = free.len();
    let neg_h = DMatrix::from_fn(k, k, |i, j| -eval.hessian[free[i]][free[j]]);
    let g = DVector::from_iterator(k, free.iter().map(|&i| eval.gradient[i]));
    let scale = (0..k).map(|i| neg_h[(i, i)].abs()).fold(0.0_f64, f64::max);
    let mut damping = 0.0;
    for _ in 0..8 {
        let mut m = neg_h.clone();
        for i in 0..k {
            m[(i, i)] += damping;
        }
        if let Some(chol) = m.cholesky() {
            let step = chol.solve(&g);
            let mut d = vec![0.0; n];
            for (slot, &i) in free.iter().enumerate() {
                d[i] = step[slot];
            }
            return Some(d);
        }
        damping = if damping == 0.0 { 1e-10 * (1.0 + scale) } else { damping * 100.0 };
    }
    None
}

/// Maximizes `f` over the box `[lower, upper]` starting from `x0`.
pub fn maximize<F>(
    mut f: F,
    x0: Vec<f64>,
    lower: &[f64],
    upper: &[f64],
    opts: &AscentOptions,
) -> AscentResult
where
    F: FnMut(&[f64]) -> Evaluation,
{
    let n = x0.len();
    let mut x = x0;
    project(&mut x, lower, upper);
    let mut eval = f(&x);
    let mut iterations = 0;

    loop {
        let pg = projected_gradient(&x, &eval.gradient, lower, upper);
        let pg_norm = inf_norm(&pg);
        if pg_norm < opts.tol {
            return AscentResult {
                x,
                value: eval.value,
                iterations,
                projected_gradient_norm: pg_norm,
                converged: true,
            };
        }
        if iterations >= opts.max_iter {
            return AscentResult {
                x,
                value: eval.value,
                iterations,
                projected_gradient_norm: pg_norm,
                converged: false,
            };
        }
        iterations += 1;

        let free: Vec<usize> = (0..n).filter(|&i| pg[i] != 0.0).collect();
        let mut candidates = Vec::with_capacity(2);
        if let Some(d) = newton_direction(&eval, &free, n) {
            if d.iter().zip(&pg).map(|(a, b)| a * b).sum::<f64>() > 0.0 {
                candidates.push(d);
            }
        }
        candidates.push(pg.clone());

        let mut accepted = None;
        for d in candidates {
            let mut s = 1.0;
            for _ in 0..MAX_BACKTRACKS {
                let mut trial: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + s * di).collect();
                project(&mut trial, lower, upper);
                let ascent: f64 = eval
                    .gradient
                    .iter()
                    .zip(trial.iter().zip(&x))
                    .map(|(g, (a, b))| g * (a - b))
                    .sum();
                let trial_eval = f(&trial);
                if trial_eval.value.is_finite()
                    && trial_eval.value >= eval.value + opts.armijo * ascent
                {
                    accepted = Some((trial, trial_eval));
                    break;
                }
                s *= opts.shrink;
            }
            if accepted.is_some() {
                break;
            }
        }

        match accepted {
            Some((trial, trial_eval)) => {
                let moved = inf_norm(
                    &trial.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>(),
                );
                x = trial;
                eval = trial_eval;
                if moved < opts.min_step {
                    let pg = projected_gradient(&x, &eval.gradient, lower, upper);
                    return AscentResult {
                        x,
                        value: eval.value,
                        iterations,
                        projected_gradient_norm: inf_norm(&pg),
                        converged: true,
                    };
                }
            }
            None => {
                // No ascent possible at working precision.
                return AscentResult {
                    x,
                    value: eval.value,
                    iterations,
                    projected_gradient_norm: pg_norm,
                    converged: true,
                };
            }
        }
    }
}
