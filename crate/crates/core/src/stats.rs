//! Evaluation statistics: rank correlation, bootstrap spread, recovery
//! metrics and corrected significance tests.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{DktError, Result};
use crate::fit::mix;
use crate::sigmoid::SigmoidParams;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const DEFAULT_GRID_POINTS: usize = 100;

/// Average (1-based) ranks; tied values share the mean of their positions.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && x[order[j]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &o in &order[i..j] {
            ranks[o] = r;
        }
        i = j;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(DktError::Precondition(format!(
            "length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(DktError::Degenerate("correlation of a constant vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(DktError::Precondition(format!(
            "spearman needs equal lengths of at least 3, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(DktError::Precondition("spearman input must be finite".into()));
    }
    pearson(&mid_ranks(x), &mid_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bootstrap {
    pub mean: f64,
    pub std: f64,
    pub samples: Vec<f64>,
    /// Resamples dropped because one side was constant.
    pub skipped: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn resample_rng(seed: u64, r: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed) ^ r))
}

/// Spearman correlation over `resamples` paired resamples drawn with
/// replacement. Each resample has its own RNG stream, so two calls with the
/// same seed and length draw the same index sets.
pub fn bootstrap_corr(pred: &[f64], meas: &[f64], resamples: usize, seed: u64) -> Result<Bootstrap> {
    let n = pred.len();
    if n != meas.len() || n < 5 {
        return Err(DktError::Precondition(format!(
            "bootstrap needs equal lengths of at least 5, got {} and {}",
            n,
            meas.len()
        )));
    }
    if resamples < 100 {
        return Err(DktError::Precondition(format!(
            "bootstrap needs at least 100 resamples, got {resamples}"
        )));
    }
    let draws: Vec<Option<f64>> = (0..resamples as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = resample_rng(seed, r);
            let (mut p, mut m) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for _ in 0..n {
                let i = rng.random_range(0..n);
                p.push(pred[i]);
                m.push(meas[i]);
            }
            match spearman(&p, &m) {
                Ok(c) => Ok(Some(c)),
                Err(DktError::Degenerate(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let samples: Vec<f64> = draws.iter().flatten().copied().collect();
    let skipped = resamples - samples.len();
    if 2 * skipped > resamples {
        return Err(DktError::TooFewValidResamples {
            valid: samples.len(),
            total: resamples,
        });
    }
    let (mean, std) = mean_std(&samples);
    Ok(Bootstrap {
        mean,
        std,
        samples,
        skipped,
    })
}

/// `points` equispaced values on `[lo, hi]`, endpoints included.
pub fn stage_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..points)
            .map(|g| {
                if g + 1 == points {
                    hi
                } else {
                    lo + (hi - lo) * g as f64 / (points - 1) as f64
                }
            })
            .collect(),
    }
}

/// Mean absolute difference between paired curves on a grid, averaged over
/// the curves.
pub fn curve_mae<F, G>(truth: &[F], estimate: &[G], grid: &[f64]) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    if truth.len() != estimate.len() || truth.is_empty() {
        return Err(DktError::Precondition(format!(
            "curve families must be non-empty and equal in size, got {} and {}",
            truth.len(),
            estimate.len()
        )));
    }
    if grid.is_empty() {
        return Err(DktError::Precondition("empty evaluation grid".into()));
    }
    let per_curve: f64 = truth
        .iter()
        .zip(estimate)
        .map(|(t, e)| grid.iter().map(|&s| (t(s) - e(s)).abs()).sum::<f64>() / grid.len() as f64)
        .sum();
    Ok(per_curve / truth.len() as f64)
}

/// [`curve_mae`] for families of sigmoid curves.
pub fn trajectory_mae(truth: &[SigmoidParams], estimate: &[SigmoidParams], grid: &[f64]) -> Result<f64> {
    let t: Vec<_> = truth.iter().map(|p| move |s: f64| p.eval(s)).collect();
    let e: Vec<_> = estimate.iter().map(|p| move |s: f64| p.eval(s)).collect();
    curve_mae(&t, &e, grid)
}

/// Least-squares line `y ≈ intercept + slope x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub intercept: f64,
    pub slope: f64,
    pub r2: f64,
}

impl AffineFit {
    pub fn apply(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

pub fn affine_fit(y: &[f64], x: &[f64]) -> Result<AffineFit> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(DktError::Precondition(format!(
            "regression needs equal lengths of at least 3, got {} and {}",
            y.len(),
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(DktError::Degenerate("regressor is constant".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sst: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    let r2 = if sst == 0.0 { 1.0 } else { 1.0 - sse / sst };
    Ok(AffineFit {
        intercept,
        slope,
        r2,
    })
}

/// R² of regressing true shifts on estimated ones; blind to any affine
/// re-labelling of the estimated stage axis.
pub fn shift_r2(truth: &[f64], estimate: &[f64]) -> Result<f64> {
    if truth.iter().all(|v| *v == truth[0]) && !truth.is_empty() {
        return Err(DktError::Degenerate("true shifts are constant".into()));
    }
    Ok(affine_fit(truth, estimate)?.r2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// Two-tailed.
    pub p: f64,
}

pub fn welch_t(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(DktError::Precondition(format!(
            "t-test needs at least 2 samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        if ma == mb {
            return Err(DktError::Degenerate("both samples constant and equal".into()));
        }
        let t = if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY };
        let df = (a.len() + b.len() - 2) as f64;
        return Ok(WelchTest { t, df, p: 0.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| DktError::Degenerate(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(WelchTest { t, df, p })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub p_raw: f64,
    pub p_bonferroni: f64,
    pub significant: bool,
}

/// Welch test between two sets of bootstrap correlations with a Bonferroni
/// correction over `comparisons` tests.
pub fn compare_models(a: &[f64], b: &[f64], comparisons: usize) -> Result<Comparison> {
    if comparisons == 0 {
        return Err(DktError::Precondition("comparisons must be at least 1".into()));
    }
    let test = welch_t(a, b)?;
    let p_bonferroni = (test.p * comparisons as f64).min(1.0);
    Ok(Comparison {
        p_raw: test.p,
        p_bonferroni,
        significant: p_bonferroni < SIGNIFICANCE_LEVEL,
    })
}

/// One (model, region) entry of an evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub point: f64,
    pub mean: f64,
    pub std: f64,
    pub skipped: usize,
    /// Test against the reference model; absent for the reference itself.
    pub comparison: Option<Comparison>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// (curve label, MAE)
    pub trajectory_mae: Vec<(String, f64)>,
    /// (disease, R²)
    pub shift_r2: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub models: Vec<String>,
    pub regions: Vec<String>,
    pub reference: String,
    pub resamples: usize,
    pub seed: u64,
    /// `cells[model][region]`
    pub cells: Vec<Vec<EvalCell>>,
    pub recovery: Option<RecoveryReport>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.cells.len() != self.models.len() || self.cells.iter().any(|r| r.len() != self.regions.len()) {
            return Err(DktError::Precondition("report cells do not match its models and regions".into()));
        }
        for c in self.cells.iter().flatten() {
            let in_range = |v: f64| (-1.0..=1.0).contains(&v);
            if !in_range(c.point) || !in_range(c.mean) || c.std < 0.0 {
                return Err(DktError::Precondition(format!("invalid report cell {c:?}")));
            }
        }
        Ok(())
    }

    fn has_comparisons(&self) -> bool {
        self.cells.iter().flatten().any(|c| c.comparison.is_some())
    }

    fn header_note(&self) -> String {
        let spread = format!(
            "spread = std over {} bootstrap resamples of the test (prediction, measurement) pairs (seed {})",
            self.resamples, self.seed
        );
        if self.has_comparisons() {
            format!(
                "{spread}; * = Bonferroni-corrected Welch t-test vs {} at p < {}",
                self.reference, SIGNIFICANCE_LEVEL
            )
        } else {
            spread
        }
    }

    /// Long format, one row per cell. The test columns are left out when no
    /// cell was compared.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| DktError::Schema(e.to_string());
        let tested = self.has_comparisons();
        let mut header = vec!["model", "region", "point", "bootstrap_mean", "bootstrap_std", "skipped_resamples"];
        if tested {
            header.extend(["p_raw", "p_bonferroni", "significant"]);
        }
        w.write_record(&header).map_err(io)?;
        for (model, row) in self.models.iter().zip(&self.cells) {
            for (region, c) in self.regions.iter().zip(row) {
                let mut record = vec![
                    model.clone(),
                    region.clone(),
                    c.point.to_string(),
                    c.mean.to_string(),
                    c.std.to_string(),
                    c.skipped.to_string(),
                ];
                if tested {
                    match c.comparison {
                        Some(cmp) => record.extend([
                            cmp.p_raw.to_string(),
                            cmp.p_bonferroni.to_string(),
                            cmp.significant.to_string(),
                        ]),
                        None => record.extend([String::new(), String::new(), String::new()]),
                    }
                }
                w.write_record(&record).map_err(io)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| DktError::Schema(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Model-by-region grid of "mean ± std" cells, starred when significant.
    pub fn to_text(&self) -> String {
        let cell = |c: &EvalCell| {
            let star = if c.comparison.is_some_and(|x| x.significant) { "*" } else { "" };
            format!("{:.2} ± {:.2}{}", c.mean, c.std, star)
        };
        let mut columns: Vec<Vec<String>> = Vec::new();
        let mut first = vec!["model".to_string()];
        first.extend(self.models.iter().cloned());
        columns.push(first);
        for (r, region) in self.regions.iter().enumerate() {
            let mut col = vec![region.clone()];
            col.extend(self.cells.iter().map(|row| cell(&row[r])));
            columns.push(col);
        }
        let widths: Vec<usize> = columns
            .iter()
            .map(|c| c.iter().map(|s| s.chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let _ = writeln!(out, "# {}", self.header_note());
        for row in 0..=self.models.len() {
            let line: Vec<String> = columns
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (col, &w))| {
                    let pad = w - col[row].chars().count();
                    if i == 0 {
                        format!("{}{}", col[row], " ".repeat(pad))
                    } else {
                        format!("{}{}", " ".repeat(pad), col[row])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        if let Some(rec) = &self.recovery {
            let _ = writeln!(out);
            for (label, v) in &rec.trajectory_mae {
                let _ = writeln!(out, "trajectory MAE {label}: {v:.4}");
            }
            for (label, v) in &rec.shift_r2 {
                let _ = writeln!(out, "time-shift R2 {label}: {v:.4}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn spearman_examples() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap(), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-15);
    }

    #[test]
    fn spearman_rejects_constant_and_short() {
        assert!(matches!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(DktError::Degenerate(_))));
        assert!(matches!(spearman(&[1.0, 2.0], &[1.0, 2.0]), Err(DktError::Precondition(_))));
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn bootstrap_perfect_and_deterministic() {
        let x: Vec<f64> = (0..10).map(|v| v as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v).collect();
        let b = bootstrap_corr(&x, &y, 100, 3).unwrap();
        assert_eq!(b.mean, 1.0);
        assert_eq!(b.std, 0.0);
        assert_eq!(b, bootstrap_corr(&x, &y, 100, 3).unwrap());
        assert_ne!(b.samples.len(), 0);
    }

    #[test]
    fn bootstrap_preconditions() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!(bootstrap_corr(&x, &x, 100, 0).is_err());
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(bootstrap_corr(&x, &x, 99, 0).is_err());
    }

    #[test]
    fn bootstrap_mostly_degenerate_fails() {
        let x = [0.5; 6];
        let y = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(matches!(
            bootstrap_corr(&x, &y, 200, 1),
            Err(DktError::TooFewValidResamples { .. })
        ));
    }

    #[test]
    fn bootstrap_std_close_to_large_rerun() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let x: Vec<f64> = (0..20).map(|v| v as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + 2.0 * noise.sample(&mut rng)).collect();
        let small = bootstrap_corr(&x, &y, 1000, 5).unwrap();
        let large = bootstrap_corr(&x, &y, 10_000, 6).unwrap();
        assert!((small.std - large.std).abs() < 0.25 * large.std, "{} vs {}", small.std, large.std);
    }

    #[test]
    fn trajectory_mae_examples() {
        let p = SigmoidParams::new(1.0, 5.0, 0.3, 0.0).unwrap();
        let q = SigmoidParams::new(1.0, 5.0, 0.3, 0.1).unwrap();
        let grid = stage_grid(0.0, 1.0, DEFAULT_GRID_POINTS);
        assert_eq!(trajectory_mae(&[p], &[p], &grid).unwrap(), 0.0);
        assert!((trajectory_mae(&[p], &[q], &grid).unwrap() - 0.1).abs() < 1e-12);
        assert!(trajectory_mae(&[p], &[], &grid).is_err());
        assert!(trajectory_mae(&[p], &[q], &[]).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let g = stage_grid(-2.0, 3.0, 100);
        assert_eq!((g.len(), g[0], g[99]), (100, -2.0, 3.0));
    }

    #[test]
    fn shift_r2_examples() {
        let t: Vec<f64> = (0..30).map(|v| (v as f64 * 0.37).sin() * 5.0).collect();
        assert!((shift_r2(&t, &t).unwrap() - 1.0).abs() < 1e-14);
        let e: Vec<f64> = t.iter().map(|v| 2.0 * v + 5.0).collect();
        assert!((shift_r2(&t, &e).unwrap() - 1.0).abs() < 1e-14);
        assert!(shift_r2(&t, &[1.0; 30]).is_err());
    }

    #[test]
    fn shift_r2_of_permutation_is_small() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Vec<f64> = (0..150).map(|_| rng.random_range(-13.0..10.0)).collect();
        let mut e = t.clone();
        e.shuffle(&mut rng);
        assert!(shift_r2(&t, &e).unwrap().abs() < 0.1);
    }

    // reference values computed with scipy.stats.ttest_ind(equal_var=False)
    #[test]
    fn welch_matches_reference() {
        let cases: [(&[f64], &[f64], f64, f64, f64); 3] = [
            (
                &[1.0, 2.0, 3.0, 4.0, 5.0],
                &[2.0, 4.0, 6.0, 8.0, 10.5],
                -1.8831158916154396,
                5.721820767028301,
                0.11105400259981621,
            ),
            (
                &[0.1, 0.4, 0.35, 0.8, 0.9, 0.2],
                &[0.5, 0.55, 0.45, 0.61],
                -0.5074862934418309,
                5.653890178748947,
                0.6309925708797237,
            ),
            (
                &[0.0, 0.0, 0.0, 0.0, 0.001],
                &[1.0, 1.0, 1.0, 1.0, 1.001],
                -3535.533905932932,
                8.0,
                4.5875094303674026e-26,
            ),
        ];
        for (a, b, t, df, p) in cases {
            let w = welch_t(a, b).unwrap();
            assert!((w.t - t).abs() < 1e-9 * t.abs(), "{w:?}");
            assert!((w.df - df).abs() < 1e-9 * df, "{w:?}");
            assert!((w.p - p).abs() < 1e-6 * p, "{w:?}");
        }
    }

    #[test]
    fn bonferroni() {
        let a = [0.0, 0.0, 0.0, 0.0, 0.001];
        let b = [1.0, 1.0, 1.0, 1.0, 1.001];
        let c = compare_models(&a, &b, 4).unwrap();
        assert!(c.significant);
        assert_eq!(c.p_bonferroni, 4.0 * c.p_raw);
        let x = [0.1, 0.4, 0.35, 0.8, 0.9, 0.2];
        let same = compare_models(&x, &x, 4).unwrap();
        assert_eq!(same.p_bonferroni, 1.0);
        assert!(!same.significant);
        let one = compare_models(&x, &[0.5, 0.55, 0.45, 0.61], 1).unwrap();
        assert_eq!(one.p_raw, one.p_bonferroni);
        assert!(matches!(compare_models(&[1.0, 1.0], &[1.0, 1.0], 1), Err(DktError::Degenerate(_))));
    }

    fn report() -> EvalReport {
        let cell = |m: f64, sig: Option<bool>| EvalCell {
            point: m,
            mean: m,
            std: 0.05,
            skipped: 0,
            comparison: sig.map(|s| Comparison {
                p_raw: 0.01,
                p_bonferroni: 0.04,
                significant: s,
            }),
        };
        EvalReport {
            models: vec!["DKT".into(), "linear".into()],
            regions: vec!["k0".into(), "k1".into()],
            reference: "DKT".into(),
            resamples: 100,
            seed: 0,
            cells: vec![
                vec![cell(0.9, None), cell(0.8, None)],
                vec![cell(0.5, Some(true)), cell(0.7, Some(false))],
            ],
            recovery: None,
        }
    }

    #[test]
    fn text_table_layout() {
        let text = report().to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# spread = std over 100 bootstrap"));
        assert_eq!(lines[1].split_whitespace().collect::<Vec<_>>(), ["model", "k0", "k1"]);
        assert!(lines[3].contains("0.50 ± 0.05*"));
        assert!(lines[3].ends_with("0.70 ± 0.05"));
    }

    #[test]
    fn csv_rows() {
        let csv = report().to_csv().unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(3).unwrap().starts_with("linear,k0,0.5,0.5,0.05,0,0.01,0.04,true"));
        report().validate().unwrap();
    }

    #[test]
    fn untested_report_has_no_significance_columns() {
        let mut r = report();
        r.cells.iter_mut().flatten().for_each(|c| c.comparison = None);
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 6);
        assert!(!r.to_text().contains("t-test"));
    }

    fn brute_spearman(x: &[f64], y: &[f64]) -> f64 {
        // rank by counting, ties averaged
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|a| {
                    let less = v.iter().filter(|b| *b < a).count() as f64;
                    let eq = v.iter().filter(|b| *b == a).count() as f64;
                    less + (eq + 1.0) / 2.0
                })
                .collect()
        };
        let (rx, ry) = (rank(x), rank(y));
        let n = x.len() as f64;
        let m = (n + 1.0) / 2.0;
        let num: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - m) * (b - m)).sum();
        let dx: f64 = rx.iter().map(|a| (a - m).powi(2)).sum();
        let dy: f64 = ry.iter().map(|b| (b - m).powi(2)).sum();
        num / (dx * dy).sqrt()
    }

    proptest! {
        #[test]
        fn spearman_matches_counting_ranks(
            pairs in prop::collection::vec((0u8..6, 0u8..6), 3..12)
        ) {
            let x: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
            match spearman(&x, &y) {
                Ok(r) => prop_assert!((r - brute_spearman(&x, &y)).abs() < 1e-12),
                Err(_) => prop_assert!(x.iter().all(|v| *v == x[0]) || y.iter().all(|v| *v == y[0])),
            }
        }

        #[test]
        fn spearman_symmetric_and_monotone_invariant(
            x in prop::collection::vec(-10.0f64..10.0, 3..30),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-5.0..5.0)).collect();
            prop_assume!(spearman(&x, &y).is_ok());
            let r = spearman(&x, &y).unwrap();
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((r - spearman(&y, &x).unwrap()).abs() < 1e-12);
            let fx: Vec<f64> = x.iter().map(|v| v.exp() + 3.0 * v).collect();
            prop_assert!((r - spearman(&fx, &y).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn shift_r2_affine_invariant(
            t in prop::collection::vec(-10.0f64..10.0, 5..40),
            noise in prop::collection::vec(-1.0f64..1.0, 40),
            a in -5.0f64..5.0,
            k in prop_oneof![0.1f64..10.0, -10.0f64..-0.1],
        ) {
            let e: Vec<f64> = t.iter().zip(&noise).map(|(v, n)| v + n).collect();
            let mapped: Vec<f64> = e.iter().map(|v| a + k * v).collect();
            prop_assume!(shift_r2(&t, &e).is_ok());
            prop_assert!((shift_r2(&t, &e).unwrap() - shift_r2(&t, &mapped).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn trajectory_mae_is_a_metric(
            ps in prop::collection::vec((0.1f64..2.0, 0.5f64..10.0, -1.0f64..1.0, -1.0f64..1.0), 9)
        ) {
            let fam = |i: usize| -> Vec<SigmoidParams> {
                ps[3 * i..3 * i + 3]
                    .iter()
                    .map(|&(a, b, c, d)| SigmoidParams::new(a, b, c, d).unwrap())
                    .collect()
            };
            let (x, y, z) = (fam(0), fam(1), fam(2));
            let grid = stage_grid(-2.0, 2.0, 50);
            let m = |a: &[SigmoidParams], b: &[SigmoidParams]| trajectory_mae(a, b, &grid).unwrap();
            prop_assert_eq!(m(&x, &x), 0.0);
            prop_assert!((m(&x, &y) - m(&y, &x)).abs() < 1e-15);
            prop_assert!(m(&x, &z) <= m(&x, &y) + m(&y, &z) + 1e-12);
        }

        #[test]
        fn bootstrap_mean_tends_to_point(seed in any::<u64>()) {
            let x: Vec<f64> = (0..30).map(|v| v as f64).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|v| v + rng.random_range(-1e-9..1e-9)).collect();
            let b = bootstrap_corr(&x, &y, 100, seed).unwrap();
            prop_assert!((b.mean - spearman(&x, &y).unwrap()).abs() < 1e-12);
        }
    }
}
