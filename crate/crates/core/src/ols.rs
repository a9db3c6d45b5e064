//! Ordinary least squares without intercept, with classical standard errors.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Relative tolerance below which a column is treated as a linear
/// combination of the columns before it.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct OlsFit {
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_stats: Vec<f64>,
    /// Two-sided p-values; `NaN` when there are no residual degrees of freedom.
    pub p_values: Vec<f64>,
    pub residuals: Vec<f64>,
    pub rss: f64,
    pub residual_df: usize,
    /// Uncentered R² (the model has no intercept).
    pub r_squared: f64,
}

/// Reports the first column that is (numerically) a linear combination of
/// the preceding ones, using modified Gram-Schmidt.
fn first_dependent_column(columns: &[Vec<f64>]) -> Option<usize> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(columns.len());
    for (j, col) in columns.iter().enumerate() {
        let norm0 = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            return Some(j);
        }
        let mut v = col.clone();
        for q in &basis {
            let proj: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm <= RANK_TOL * norm0 {
            return Some(j);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    None
}

/// Fits `response ≈ Σ_j coef_j · columns[j]`.
pub fn ols(columns: &[Vec<f64>], names: &[String], response: &[f64]) -> Result<OlsFit> {
    let n = response.len();
    let p = columns.len();
    if n < p.max(1) {
        return Err(Error::TooFewObservations { needed: p.max(1), got: n });
    }
    if let Some(j) = first_dependent_column(columns) {
        return Err(Error::RankDeficient {
            column: names.get(j).cloned().unwrap_or_else(|| format!("#{j}")),
        });
    }

    let x = DMatrix::from_fn(n, p, |i, j| columns[j][i]);
    let y = DVector::from_column_slice(response);
    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * &y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient { column: "R".into() })?;

    let fitted = &x * &beta;
    let residuals: Vec<f64> = (0..n).map(|i| y[i] - fitted[i]).collect();
    let rss: f64 = residuals.iter().map(|e| e * e).sum();
    let tss: f64 = response.iter().map(|v| v * v).sum();
    let residual_df = n - p;

    let r_inv = r
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient { column: "R".into() })?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let s2 = if residual_df > 0 {
        rss / residual_df as f64
    } else {
        f64::NAN
    };
    let std_errors: Vec<f64> = (0..p).map(|j| (s2 * xtx_inv[(j, j)]).sqrt()).collect();
    let t_stats: Vec<f64> = beta
        .iter()
        .zip(&std_errors)
        .map(|(b, se)| b / se)
        .collect();
    let p_values = match StudentsT::new(0.0, 1.0, residual_df as f64) {
        Ok(dist) if residual_df > 0 => t_stats
            .iter()
            .map(|t| {
                if t.is_finite() {
                    2.0 * (1.0 - dist.cdf(t.abs()))
                } else if t.is_nan() {
                    f64::NAN
                } else {
                    0.0
                }
            })
            .collect(),
        _ => vec![f64::NAN; p],
    };

    Ok(OlsFit {
        coefficients: beta.iter().copied().collect(),
        std_errors,
        t_stats,
        p_values,
        residuals,
        rss,
        residual_df,
        r_squared: if tss > 0.0 { 1.0 - rss / tss } else { f64::NAN },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn exact_fit_recovers_coefficients() {
        let x1: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let x2: Vec<f64> = (0..10).map(|i| ((i * 7) % 5) as f64).collect();
        let y: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| 0.25 * a - 1.5 * b).collect();
        let fit = ols(&[x1, x2], &names(2), &y).unwrap();
        assert!((fit.coefficients[0] - 0.25).abs() < 1e-12);
        assert!((fit.coefficients[1] + 1.5).abs() < 1e-12);
        assert!(fit.rss < 1e-20);
    }

    #[test]
    fn collinear_column_is_named() {
        let x1: Vec<f64> = (0..6).map(|i| i as f64 + 1.0).collect();
        let x2: Vec<f64> = x1.iter().map(|v| 3.0 * v).collect();
        let err = ols(&[x1, x2], &names(2), &[1.0; 6]).unwrap_err();
        assert!(matches!(err, Error::RankDeficient { column } if column == "c1"));
    }

    #[test]
    fn standard_error_matches_closed_form() {
        // Single regressor: se = sqrt(s² / Σx²).
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let y = vec![1.1, 1.9, 3.2, 3.9, 5.1];
        let fit = ols(std::slice::from_ref(&x), &names(1), &y).unwrap();
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let b = sxy / sxx;
        let rss: f64 = x.iter().zip(&y).map(|(a, v)| (v - b * a).powi(2)).sum();
        let se = (rss / 4.0 / sxx).sqrt();
        assert!((fit.coefficients[0] - b).abs() < 1e-12);
        assert!((fit.std_errors[0] - se).abs() < 1e-12);
        assert!(fit.p_values[0] < 1e-4);
    }
}
