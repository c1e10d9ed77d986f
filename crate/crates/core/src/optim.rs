//! Derivative-free local minimizers shared by the model fits and baselines.

use std::cmp::Ordering;

use crate::error::{DktError, Result};

#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    pub max_iter: usize,
    /// Simplex diameter (max-norm, per coordinate) below which we stop.
    pub xtol: f64,
    /// Relative spread of simplex values below which we stop.
    pub ftol: f64,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead {
            max_iter: 1000,
            xtol: 1e-9,
            ftol: 1e-13,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Orders by value, then lexicographically by position.
pub fn cmp_candidates(fa: f64, xa: &[f64], fb: f64, xb: &[f64]) -> Ordering {
    fa.total_cmp(&fb).then_with(|| {
        xa.iter()
            .zip(xb)
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

impl NelderMead {
    pub fn with_max_iter(max_iter: usize) -> Self {
        NelderMead {
            max_iter,
            ..Default::default()
        }
    }

    pub fn minimize<F>(&self, mut f: F, x0: &[f64], step: &[f64]) -> Minimum
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = x0.len();
        let mut f = |x: &[f64]| sanitize(f(x));
        let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
        simplex.push((x0.to_vec(), f(x0)));
        for i in 0..n {
            let mut x = x0.to_vec();
            x[i] += if step[i] != 0.0 { step[i] } else { 1e-3 };
            let fx = f(&x);
            simplex.push((x, fx));
        }

        let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
        let mut iterations = 0;
        let mut converged = false;
        let sort = |s: &mut Vec<(Vec<f64>, f64)>| {
            s.sort_by(|a, b| cmp_candidates(a.1, &a.0, b.1, &b.0));
        };
        sort(&mut simplex);

        while iterations < self.max_iter {
            let best = simplex[0].1;
            let worst = simplex[n].1;
            let fspread = if worst.is_finite() { worst - best } else { f64::INFINITY };
            let xspread = simplex[1..]
                .iter()
                .flat_map(|(x, _)| x.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
                .fold(0.0f64, f64::max);
            if fspread <= self.ftol * best.abs() + 1e-30 && xspread <= self.xtol {
                converged = true;
                break;
            }
            if xspread <= self.xtol * 1e-3 {
                // collapsed simplex; value spread is rounding noise
                converged = true;
                break;
            }
            iterations += 1;

            let mut centroid = vec![0.0; n];
            for (x, _) in &simplex[..n] {
                for (c, v) in centroid.iter_mut().zip(x) {
                    *c += v / n as f64;
                }
            }
            let toward = |coef: f64, from: &[f64]| -> Vec<f64> {
                centroid
                    .iter()
                    .zip(from)
                    .map(|(c, w)| c + coef * (c - w))
                    .collect()
            };

            let xr = toward(alpha, &simplex[n].0);
            let fr = f(&xr);
            if fr < simplex[0].1 {
                let xe = toward(gamma, &simplex[n].0);
                let fe = f(&xe);
                simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            } else if fr < simplex[n - 1].1 {
                simplex[n] = (xr, fr);
            } else {
                let (xc, fc) = if fr < simplex[n].1 {
                    // outside contraction
                    let xc: Vec<f64> = centroid
                        .iter()
                        .zip(&xr)
                        .map(|(c, r)| c + rho * (r - c))
                        .collect();
                    let fc = f(&xc);
                    (xc, fc)
                } else {
                    let xc: Vec<f64> = centroid
                        .iter()
                        .zip(&simplex[n].0)
                        .map(|(c, w)| c + rho * (w - c))
                        .collect();
                    let fc = f(&xc);
                    (xc, fc)
                };
                if fc < simplex[n].1.min(fr) {
                    simplex[n] = (xc, fc);
                } else {
                    let x_best = simplex[0].0.clone();
                    for entry in simplex.iter_mut().skip(1) {
                        let x: Vec<f64> = x_best
                            .iter()
                            .zip(&entry.0)
                            .map(|(b, v)| b + sigma * (v - b))
                            .collect();
                        let fx = f(&x);
                        *entry = (x, fx);
                    }
                }
            }
            sort(&mut simplex);
        }

        let (x, fx) = simplex.swap_remove(0);
        Minimum {
            x,
            f: fx,
            iterations,
            converged,
        }
    }

    /// Runs the simplex from every start, re-polishes the winner with a fresh
    /// simplex, and returns the best point found. Ties go to the
    /// lexicographically smallest parameter vector.
    pub fn multistart<F>(&self, mut f: F, starts: &[Vec<f64>], step: &[f64]) -> Result<Minimum>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let mut best: Option<Minimum> = None;
        let consider = |m: Minimum, best: &mut Option<Minimum>| {
            if !m.f.is_finite() {
                return;
            }
            let better = match best {
                None => true,
                Some(b) => cmp_candidates(m.f, &m.x, b.f, &b.x) == Ordering::Less,
            };
            if better {
                *best = Some(m);
            }
        };
        for s in starts {
            let m = self.minimize(&mut f, s, step);
            consider(m, &mut best);
        }
        let Some(winner) = best.clone() else {
            return Err(DktError::SolverFailure(
                "every restart produced a non-finite objective".into(),
            ));
        };
        let polished = self.minimize(&mut f, &winner.x, step);
        consider(polished, &mut best);
        Ok(best.expect("winner exists"))
    }
}

/// Golden-section search on `[lo, hi]`; returns the best point evaluated.
pub fn golden_section<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = sanitize(f(c));
    let mut fd = sanitize(f(d));
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = sanitize(f(c));
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = sanitize(f(d));
        }
        for (x, fx) in [(c, fc), (d, fd)] {
            if fx < best.1 {
                best = (x, fx);
            }
        }
    }
    best
}
