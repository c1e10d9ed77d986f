//! One-input regressions: ordinary least squares and least-squares B-splines.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DktError, Result};

pub const DEFAULT_KNOTS: usize = 4;
pub const CUBIC: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnivariateRegressor {
    Linear {
        intercept: f64,
        slope: f64,
    },
    /// Clamped B-spline on `[lo, hi]`; outside that range the first or last
    /// polynomial piece is continued.
    Spline {
        degree: usize,
        lo: f64,
        hi: f64,
        interior_knots: Vec<f64>,
        coefficients: Vec<f64>,
    },
}

fn check_xy(x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(DktError::Precondition(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    if x.len() < min {
        return Err(DktError::Precondition(format!("need at least {min} points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(DktError::Precondition("regression inputs must be finite".into()));
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(DktError::Degenerate("all inputs are identical".into()));
    }
    Ok(())
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<UnivariateRegressor> {
    check_xy(x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    Ok(UnivariateRegressor::Linear {
        intercept: my - slope * mx,
        slope,
    })
}

/// Cubic least-squares spline with interior knots at data quantiles.
pub fn spline_fit(x: &[f64], y: &[f64], knots: usize) -> Result<UnivariateRegressor> {
    spline_fit_degree(x, y, knots, CUBIC)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

/// Quantile knots strictly inside `(lo, hi)`; coincident ones (from heavy
/// ties) are merged.
fn quantile_knots(x: &[f64], count: usize) -> Vec<f64> {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let (lo, hi) = (s[0], s[s.len() - 1]);
    let mut knots: Vec<f64> = (1..=count)
        .map(|j| quantile(&s, j as f64 / (count + 1) as f64))
        .filter(|&t| t > lo && t < hi)
        .collect();
    knots.dedup();
    knots
}

pub fn spline_fit_degree(x: &[f64], y: &[f64], knots: usize, degree: usize) -> Result<UnivariateRegressor> {
    if degree == 0 {
        return Err(DktError::InvalidConfig("spline degree must be at least 1".into()));
    }
    check_xy(x, y, knots + degree + 1)?;
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let interior = quantile_knots(x, knots);
    let t = knot_vector(degree, lo, hi, &interior);
    let m = interior.len() + degree + 1;
    let mut a = DMatrix::<f64>::zeros(m, m);
    let mut b = DVector::<f64>::zeros(m);
    for (&xi, &yi) in x.iter().zip(y) {
        let (span, basis) = basis_funs(&t, degree, xi);
        let first = span - degree;
        for (p, &bp) in basis.iter().enumerate() {
            b[first + p] += bp * yi;
            for (q, &bq) in basis.iter().enumerate() {
                a[(first + p, first + q)] += bp * bq;
            }
        }
    }
    let coefficients = a
        .cholesky()
        .ok_or_else(|| DktError::RankDeficient(format!("spline with {} interior knots is not identified by the data", interior.len())))?
        .solve(&b);
    Ok(UnivariateRegressor::Spline {
        degree,
        lo,
        hi,
        interior_knots: interior,
        coefficients: coefficients.iter().copied().collect(),
    })
}

fn knot_vector(degree: usize, lo: f64, hi: f64, interior: &[f64]) -> Vec<f64> {
    let mut t = vec![lo; degree + 1];
    t.extend_from_slice(interior);
    t.extend(std::iter::repeat_n(hi, degree + 1));
    t
}

/// Span index and the `degree + 1` non-zero basis values at `x`. Outside
/// the knot range the end spans are used, which continues their
/// polynomial pieces.
fn basis_funs(t: &[f64], degree: usize, x: f64) -> (usize, Vec<f64>) {
    let last = t.len() - degree - 2;
    let span = (degree..=last).rev().find(|&i| x >= t[i]).unwrap_or(degree);
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - t[span + 1 - j];
        right[j] = t[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let tmp = n[r] / (right[r + 1] + left[j - r]);
            n[r] = saved + right[r + 1] * tmp;
            saved = left[j - r] * tmp;
        }
        n[j] = saved;
    }
    (span, n)
}

impl UnivariateRegressor {
    pub fn predict(&self, x: f64) -> f64 {
        match self {
            UnivariateRegressor::Linear { intercept, slope } => intercept + slope * x,
            UnivariateRegressor::Spline {
                degree,
                lo,
                hi,
                interior_knots,
                coefficients,
            } => {
                let t = knot_vector(*degree, *lo, *hi, interior_knots);
                let (span, basis) = basis_funs(&t, *degree, x);
                basis
                    .iter()
                    .enumerate()
                    .map(|(p, b)| b * coefficients[span - degree + p])
                    .sum()
            }
        }
    }
}
