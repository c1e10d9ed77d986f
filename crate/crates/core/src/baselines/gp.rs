//! Exact Gaussian process regression with an anisotropic RBF kernel.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DktError, Result};
use crate::fit::mix;
use crate::optim::NelderMead;

/// Diagonal jitter tried in turn when the kernel matrix fails to factor.
pub const JITTER_LADDER: [f64; 5] = [0.0, 1e-10, 1e-8, 1e-6, 1e-4];

/// Bounds on every hyperparameter during marginal-likelihood search.
const HYPER_BOUNDS: (f64, f64) = (1e-6, 1e6);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparameters {
    pub signal_variance: f64,
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
}

impl GpHyperparameters {
    fn to_log(&self) -> Vec<f64> {
        let mut v = vec![self.signal_variance.ln()];
        v.extend(self.length_scales.iter().map(|l| l.ln()));
        v.push(self.noise_variance.ln());
        v
    }

    fn from_log(v: &[f64]) -> Self {
        GpHyperparameters {
            signal_variance: v[0].exp(),
            length_scales: v[1..v.len() - 1].iter().map(|x| x.exp()).collect(),
            noise_variance: v[v.len() - 1].exp(),
        }
    }

    fn validate(&self, dims: usize) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if self.length_scales.len() != dims {
            return Err(DktError::InvalidConfig(format!(
                "{} length scales for {dims} input dimensions",
                self.length_scales.len()
            )));
        }
        if !ok(self.signal_variance) || !ok(self.noise_variance) || !self.length_scales.iter().all(|&l| ok(l)) {
            return Err(DktError::InvalidConfig(format!("GP hyperparameters must be positive and finite: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpOptions {
    /// Marginal-likelihood searches, the first from the data-driven start.
    pub restarts: usize,
    /// Training points used while learning hyperparameters; prediction
    /// always conditions on the full set.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for GpOptions {
    fn default() -> Self {
        GpOptions {
            restarts: 3,
            max_points: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianProcess {
    pub hyperparameters: GpHyperparameters,
    /// Jitter that was added to the diagonal to make the kernel factor.
    pub jitter: f64,
    pub mean: f64,
    inputs: Vec<Vec<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

fn rbf(a: &[f64], b: &[f64], h: &GpHyperparameters) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&h.length_scales)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    h.signal_variance * (-0.5 * r2).exp()
}

fn kernel_matrix(x: &[Vec<f64>], h: &GpHyperparameters) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = rbf(&x[i], &x[j], h);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += h.noise_variance;
    }
    k
}

fn factor(x: &[Vec<f64>], h: &GpHyperparameters) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let k = kernel_matrix(x, h);
    for &jitter in &JITTER_LADDER {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c, jitter));
        }
    }
    Err(DktError::SingularKernel {
        jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

/// Negative log marginal likelihood of centred targets `r`.
fn nlml(x: &[Vec<f64>], r: &DVector<f64>, h: &GpHyperparameters) -> f64 {
    let Ok((chol, _)) = factor(x, h) else {
        return f64::INFINITY;
    };
    let alpha = chol.solve(r);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    let n = r.len() as f64;
    0.5 * r.dot(&alpha) + 0.5 * log_det + 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

fn check_inputs(x: &[Vec<f64>], y: &[f64]) -> Result<usize> {
    if x.len() != y.len() {
        return Err(DktError::Precondition(format!("{} inputs but {} targets", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(DktError::Precondition("GP regression needs at least 2 training points".into()));
    }
    let dims = x[0].len();
    if dims == 0 {
        return Err(DktError::Precondition("GP inputs have no dimensions".into()));
    }
    if x.iter().any(|r| r.len() != dims) {
        return Err(DktError::Precondition("GP inputs have inconsistent dimensions".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(DktError::Precondition("GP inputs and targets must be finite".into()));
    }
    Ok(dims)
}

fn variance(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    v.map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Data-driven starting point: signal variance from the targets, length
/// scales from the input spreads, noise at a tenth of the signal.
pub fn initial_hyperparameters(x: &[Vec<f64>], y: &[f64]) -> GpHyperparameters {
    let clamp = |v: f64| v.clamp(HYPER_BOUNDS.0, HYPER_BOUNDS.1);
    let signal = clamp(variance(y.iter().copied()));
    let dims = x[0].len();
    GpHyperparameters {
        signal_variance: signal,
        length_scales: (0..dims)
            .map(|a| clamp(variance(x.iter().map(|r| r[a])).sqrt()))
            .collect(),
        noise_variance: clamp(0.1 * signal),
    }
}

impl GaussianProcess {
    /// Conditions on the data with hyperparameters held fixed.
    pub fn with_hyperparameters(x: &[Vec<f64>], y: &[f64], hyperparameters: GpHyperparameters) -> Result<Self> {
        let dims = check_inputs(x, y)?;
        hyperparameters.validate(dims)?;
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let (chol, jitter) = factor(x, &hyperparameters)?;
        let alpha = chol.solve(&DVector::from_iterator(y.len(), y.iter().map(|v| v - mean)));
        Ok(GaussianProcess {
            hyperparameters,
            jitter,
            mean,
            inputs: x.to_vec(),
            chol,
            alpha,
        })
    }

    /// Learns hyperparameters by minimizing the negative log marginal
    /// likelihood in log space, then conditions on all the data.
    pub fn fit(x: &[Vec<f64>], y: &[f64], options: &GpOptions) -> Result<Self> {
        let dims = check_inputs(x, y)?;
        if options.restarts == 0 || options.max_points < 2 {
            return Err(DktError::InvalidConfig("GP needs at least one restart and two learning points".into()));
        }
        let init = initial_hyperparameters(x, y);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(options.seed));
        let (sx, sy): (Vec<Vec<f64>>, Vec<f64>) = if x.len() > options.max_points {
            let mut idx = sample(&mut rng, x.len(), options.max_points).into_vec();
            idx.sort_unstable();
            idx.iter().map(|&i| (x[i].clone(), y[i])).unzip()
        } else {
            (x.to_vec(), y.to_vec())
        };
        let m = sy.iter().sum::<f64>() / sy.len() as f64;
        let r = DVector::from_iterator(sy.len(), sy.iter().map(|v| v - m));
        let (lo, hi) = (HYPER_BOUNDS.0.ln(), HYPER_BOUNDS.1.ln());
        let objective = |v: &[f64]| {
            if v.iter().any(|&z| !(lo..=hi).contains(&z)) {
                return f64::INFINITY;
            }
            nlml(&sx, &r, &GpHyperparameters::from_log(v))
        };
        let start = init.to_log();
        let mut starts = vec![start.clone()];
        for _ in 1..options.restarts {
            starts.push(start.iter().map(|&z| (z + rng.random_range(-1.5..1.5)).clamp(lo, hi)).collect());
        }
        let step = vec![0.5; dims + 2];
        let best = NelderMead::default().multistart(objective, &starts, &step)?;
        let hyper = if best.f <= objective(&start) {
            GpHyperparameters::from_log(&best.x)
        } else {
            init
        };
        Self::with_hyperparameters(x, y, hyper)
    }

    pub fn dims(&self) -> usize {
        self.hyperparameters.length_scales.len()
    }

    /// Negative log marginal likelihood of `(x, y)` under `h`, with the
    /// targets centred on their mean.
    pub fn neg_log_marginal_likelihood(x: &[Vec<f64>], y: &[f64], h: &GpHyperparameters) -> Result<f64> {
        let dims = check_inputs(x, y)?;
        h.validate(dims)?;
        let m = y.iter().sum::<f64>() / y.len() as f64;
        let r = DVector::from_iterator(y.len(), y.iter().map(|v| v - m));
        Ok(nlml(x, &r, h))
    }

    /// Predictive mean and latent-function variance at `x`.
    pub fn predict(&self, x: &[f64]) -> Result<(f64, f64)> {
        if x.len() != self.dims() {
            return Err(DktError::Precondition(format!(
                "query has {} dimensions, model has {}",
                x.len(),
                self.dims()
            )));
        }
        let ks = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|xi| rbf(xi, x, &self.hyperparameters)));
        let mean = self.mean + ks.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&ks)
            .ok_or_else(|| DktError::SolverFailure("triangular solve failed".into()))?;
        let var = (self.hyperparameters.signal_variance - v.dot(&v)).max(0.0);
        Ok((mean, var))
    }
}
