//! Parameter estimation by cyclic block-coordinate MAP updates.
//!
//! One sweep updates, in order: every biomarker trajectory together with its
//! noise variance, every dysfunction trajectory, and every subject time
//! shift. Each block update minimizes the same penalized objective with all
//! other blocks held fixed, so the objective trace is non-increasing. Blocks
//! of one family are independent of each other and run in parallel. A sweep
//! ends with a damped Gauss-Newton step over all curves and shifts at once,
//! which moves along the shallow valleys that cyclic updates crawl through.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DktError, Result};
use crate::model::{CohortDataset, FittedModel, ModelConfig, MONTHS_PER_YEAR};
use crate::optim::NelderMead;
use crate::sigmoid::{sigmoid_eval, SigmoidParams};

pub(crate) mod refine;

/// Variances below this are treated as this value inside the fit objective.
pub const NOISE_FLOOR: f64 = 1e-10;

/// Minimum measurements per biomarker required to initialize a fit.
pub const MIN_MEASUREMENTS: usize = 5;


#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Prior {
    Flat,
    Gaussian { mean: f64, std: f64 },
}

impl Prior {
    /// Negative log density (zero for a flat prior).
    pub fn penalty(&self, x: f64) -> f64 {
        match *self {
            Prior::Flat => 0.0,
            Prior::Gaussian { mean, std } => {
                let z = (x - mean) / std;
                0.5 * z * z + (std * (2.0 * std::f64::consts::PI).sqrt()).ln()
            }
        }
    }

    pub fn mean(&self) -> Option<f64> {
        match *self {
            Prior::Flat => None,
            Prior::Gaussian { mean, .. } => Some(mean),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Prior::Flat => Ok(()),
            Prior::Gaussian { mean, std } if mean.is_finite() && std.is_finite() && std > 0.0 => Ok(()),
            Prior::Gaussian { .. } => Err(DktError::InvalidConfig(format!(
                "gaussian prior needs finite mean and positive std: {self:?}"
            ))),
        }
    }

    /// Draws from the prior, or from `fallback` (lo, hi) when it is flat.
    /// With `positive`, gaussian draws are rejected below 1e-3.
    fn sample(&self, rng: &mut ChaCha8Rng, fallback: (f64, f64), log_scale: bool, positive: bool) -> f64 {
        match *self {
            Prior::Gaussian { mean, std } => {
                let normal = Normal::new(mean, std).expect("validated prior");
                for _ in 0..100 {
                    let v = normal.sample(rng);
                    if !positive || v > 1e-3 {
                        return v;
                    }
                }
                if positive { mean.abs().max(1e-3) } else { mean }
            }
            Prior::Flat if log_scale => {
                let (lo, hi) = (fallback.0.ln(), fallback.1.ln());
                rng.random_range(lo..hi).exp()
            }
            Prior::Flat => rng.random_range(fallback.0..fallback.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SigmoidPriors {
    pub amplitude: Prior,
    pub slope: Prior,
    pub center: Prior,
    pub offset: Prior,
}

impl SigmoidPriors {
    pub fn flat() -> Self {
        SigmoidPriors {
            amplitude: Prior::Flat,
            slope: Prior::Flat,
            center: Prior::Flat,
            offset: Prior::Flat,
        }
    }

    pub fn penalty(&self, p: &SigmoidParams) -> f64 {
        self.amplitude.penalty(p.amplitude)
            + self.slope.penalty(p.slope)
            + self.center.penalty(p.center)
            + self.offset.penalty(p.offset)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.amplitude, self.slope, self.center, self.offset] {
            p.validate()?;
        }
        Ok(())
    }
}

/// Uniform ranges used to draw restart points for components with flat priors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RestartBox {
    pub amplitude: (f64, f64),
    pub slope: (f64, f64),
    pub center: (f64, f64),
    pub offset: (f64, f64),
}

pub(crate) const THETA_BOX: RestartBox = RestartBox {
    amplitude: (0.3, 1.5),
    slope: (1.0, 20.0),
    center: (0.0, 1.0),
    offset: (-0.3, 0.3),
};

pub(crate) const STAGE_BOX: RestartBox = RestartBox {
    amplitude: (0.3, 1.5),
    slope: (0.05, 1.0),
    center: (-15.0, 15.0),
    offset: (-0.3, 0.3),
};

impl SigmoidPriors {
    pub(crate) fn sample(&self, rng: &mut ChaCha8Rng, bx: &RestartBox) -> SigmoidParams {
        SigmoidParams {
            amplitude: self.amplitude.sample(rng, bx.amplitude, true, true),
            slope: self.slope.sample(rng, bx.slope, true, true),
            center: self.center.sample(rng, bx.center, false, false),
            offset: self.offset.sample(rng, bx.offset, false, false),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    pub theta: SigmoidPriors,
    pub lambda: SigmoidPriors,
    pub beta: Prior,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            theta: SigmoidPriors::flat(),
            lambda: SigmoidPriors {
                amplitude: Prior::Flat,
                slope: Prior::Gaussian { mean: 0.25, std: 0.5 },
                center: Prior::Gaussian { mean: 0.0, std: 10.0 },
                offset: Prior::Flat,
            },
            beta: Prior::Gaussian { mean: 0.0, std: 10.0 },
        }
    }
}

impl PriorSpec {
    pub fn flat() -> Self {
        PriorSpec {
            theta: SigmoidPriors::flat(),
            lambda: SigmoidPriors::flat(),
            beta: Prior::Flat,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        self.lambda.validate()?;
        self.beta.validate()
    }

    pub fn theta_penalty(&self, p: &SigmoidParams) -> f64 {
        self.theta.penalty(p)
    }

    pub fn lambda_penalty(&self, p: &SigmoidParams) -> f64 {
        self.lambda.penalty(p)
    }

    /// Dysfunction trajectory at the prior means (slope 0.25 and center 0 where flat).
    pub fn lambda_prior_mean(&self) -> SigmoidParams {
        SigmoidParams {
            amplitude: 1.0,
            slope: self.lambda.slope.mean().filter(|b| *b > 0.0).unwrap_or(0.25),
            center: self.lambda.center.mean().unwrap_or(0.0),
            offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    /// Random restarts per trajectory block, on top of the incoming estimate.
    #[serde(default = "defaults::restarts")]
    pub restarts: usize,
    /// Simplex iteration cap per restart.
    #[serde(default = "defaults::max_iter")]
    pub max_iter: usize,
    #[serde(default = "defaults::sweep_tol")]
    pub sweep_tol: f64,
    #[serde(default = "defaults::max_sweeps")]
    pub max_sweeps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Equispaced seeds for the time-shift search.
    #[serde(default = "defaults::shift_grid")]
    pub shift_grid: usize,
    /// Overrides the time-shift search interval (years).
    #[serde(default)]
    pub shift_support: Option<[f64; 2]>,
    /// Close every sweep with a joint Gauss-Newton step over all
    /// trajectories, dysfunction curves and shifts.
    #[serde(default = "defaults::joint_refinement")]
    pub joint_refinement: bool,
}

mod defaults {
    pub fn restarts() -> usize {
        5
    }
    pub fn max_iter() -> usize {
        1000
    }
    pub fn sweep_tol() -> f64 {
        1e-6
    }
    pub fn max_sweeps() -> usize {
        100
    }
    pub fn shift_grid() -> usize {
        64
    }
    pub fn joint_refinement() -> bool {
        true
    }
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            restarts: defaults::restarts(),
            max_iter: defaults::max_iter(),
            sweep_tol: defaults::sweep_tol(),
            max_sweeps: defaults::max_sweeps(),
            seed: 0,
            shift_grid: defaults::shift_grid(),
            shift_support: None,
            joint_refinement: defaults::joint_refinement(),
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sweep_tol > 0.0) {
            return Err(DktError::InvalidConfig("sweep_tol must be positive".into()));
        }
        if self.max_sweeps < 1 {
            return Err(DktError::InvalidConfig("max_sweeps must be at least 1".into()));
        }
        if self.max_iter < 1 {
            return Err(DktError::InvalidConfig("max_iter must be at least 1".into()));
        }
        if self.shift_grid < 2 {
            return Err(DktError::InvalidConfig("shift_grid needs at least 2 seeds".into()));
        }
        if let Some([lo, hi]) = self.shift_support {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(DktError::InvalidConfig("shift_support must be an increasing finite interval".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn simplex(&self) -> NelderMead {
        NelderMead::with_max_iter(self.max_iter)
    }
}

/// Objective decrease achieved by each block family during the last sweep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockImprovements {
    pub theta: f64,
    pub noise: f64,
    pub lambda: f64,
    pub beta: f64,
    pub joint: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub sweeps: usize,
    pub trace: Vec<f64>,
    pub last_improvement: BlockImprovements,
    pub converged: bool,
    /// (disease, unit) pairs without data; their dysfunction trajectory stays at the prior mean.
    pub degenerate_blocks: Vec<(usize, usize)>,
}

/// Identifies one block update, reported to fit observers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockUpdate {
    Trajectory(usize),
    Noise(usize),
    Dysfunction(usize, usize),
    Shift(usize),
    /// Joint refinement of all trajectories, dysfunction curves and shifts.
    Joint,
}

#[derive(Debug, Clone, Copy)]
struct Obs {
    subject: usize,
    years: f64,
    biomarker: usize,
    value: f64,
}

/// Measurement lists per block, in a subject-order independent layout.
pub(crate) struct FitIndex {
    obs: Vec<Obs>,
    /// Dataset subject indices sorted by subject id.
    subject_order: Vec<usize>,
    by_biomarker: Vec<Vec<usize>>,
    by_subject: Vec<Vec<usize>>,
    by_block: Vec<Vec<Vec<usize>>>,
}

impl FitIndex {
    pub(crate) fn new(data: &CohortDataset, config: &ModelConfig) -> Self {
        let mut subject_order: Vec<usize> = (0..data.subjects.len()).collect();
        subject_order.sort_by(|&a, &b| data.subjects[a].id.cmp(&data.subjects[b].id));
        let mut rank = vec![0usize; data.subjects.len()];
        for (r, &i) in subject_order.iter().enumerate() {
            rank[i] = r;
        }
        let mut obs: Vec<Obs> = data
            .measurements
            .iter()
            .map(|m| Obs {
                subject: m.subject,
                years: data.months(m) / MONTHS_PER_YEAR,
                biomarker: m.biomarker,
                value: m.value,
            })
            .collect();
        obs.sort_by(|a, b| {
            rank[a.subject]
                .cmp(&rank[b.subject])
                .then(a.years.total_cmp(&b.years))
                .then(a.biomarker.cmp(&b.biomarker))
                .then(a.value.total_cmp(&b.value))
        });
        let mut by_biomarker = vec![Vec::new(); config.biomarkers.len()];
        let mut by_subject = vec![Vec::new(); data.subjects.len()];
        let mut by_block = vec![vec![Vec::new(); config.units]; config.diseases.len()];
        for (idx, o) in obs.iter().enumerate() {
            by_biomarker[o.biomarker].push(idx);
            by_subject[o.subject].push(idx);
            let d = data.subjects[o.subject].disease;
            by_block[d][config.unit_of(o.biomarker)].push(idx);
        }
        FitIndex {
            obs,
            subject_order,
            by_biomarker,
            by_subject,
            by_block,
        }
    }
}

pub(crate) fn weights(epsilon: &[f64]) -> Vec<f64> {
    epsilon.iter().map(|e| 0.5 / e.max(NOISE_FLOOR)).collect()
}

fn predict_obs(o: &Obs, data: &CohortDataset, state: &FittedModel, config: &ModelConfig) -> f64 {
    let d = data.subjects[o.subject].disease;
    let lambda = &state.lambda[d][config.unit_of(o.biomarker)];
    let gamma = sigmoid_eval(state.beta[o.subject] + o.years, lambda);
    sigmoid_eval(gamma, &state.theta[o.biomarker])
}

/// Penalized objective in canonical order: Gaussian terms with floored
/// variances minus log priors.
fn objective_indexed(index: &FitIndex, data: &CohortDataset, state: &FittedModel, config: &ModelConfig) -> f64 {
    let mut total = 0.0;
    for (k, list) in index.by_biomarker.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let eps = state.epsilon[k].max(NOISE_FLOOR);
        let sse: f64 = list
            .iter()
            .map(|&o| {
                let o = &index.obs[o];
                let r = o.value - predict_obs(o, data, state, config);
                r * r
            })
            .sum();
        total += sse / (2.0 * eps) + 0.5 * list.len() as f64 * (2.0 * std::f64::consts::PI * eps).ln();
    }
    let p = &config.priors;
    total += state.theta.iter().map(|t| p.theta_penalty(t)).sum::<f64>();
    total += state.lambda.iter().flatten().map(|l| p.lambda_penalty(l)).sum::<f64>();
    total += index
        .subject_order
        .iter()
        .map(|&i| p.beta.penalty(state.beta[i]))
        .sum::<f64>();
    total
}

/// The objective every block update descends on: the negative log posterior
/// with each noise variance floored at [`NOISE_FLOOR`].
pub fn penalized_objective(data: &CohortDataset, model: &FittedModel, config: &ModelConfig) -> Result<f64> {
    check_compatible(data, config)?;
    let index = FitIndex::new(data, config);
    Ok(objective_indexed(&index, data, model, config))
}

fn check_compatible(data: &CohortDataset, config: &ModelConfig) -> Result<()> {
    config.validate()?;
    if data.biomarkers != config.biomarkers {
        return Err(DktError::InvalidConfig(format!(
            "dataset biomarkers {:?} do not match configured {:?}",
            data.biomarkers, config.biomarkers
        )));
    }
    if data.diseases != config.diseases {
        return Err(DktError::InvalidConfig(format!(
            "dataset diseases {:?} do not match configured {:?}",
            data.diseases, config.diseases
        )));
    }
    Ok(())
}

/// splitmix64 finalizer.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent, schedule-free RNG stream for one block of one sweep.
pub(crate) fn block_rng(seed: u64, family: u64, sweep: u64, key: u64) -> ChaCha8Rng {
    let h = mix(mix(mix(seed ^ mix(family)) ^ sweep) ^ key);
    ChaCha8Rng::seed_from_u64(h)
}

const FAMILY_THETA: u64 = 1;
const FAMILY_LAMBDA: u64 = 2;
pub(crate) const FAMILY_LATENT: u64 = 3;

/// Maps sigmoid parameters to unconstrained simplex coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Parametrization {
    /// (ln a, ln b, c, d)
    Full,
    /// (ln b, c) with a = 1, d = 0
    UnitShape,
}

impl Parametrization {
    pub(crate) fn encode(&self, p: &SigmoidParams) -> Vec<f64> {
        match self {
            Parametrization::Full => vec![p.amplitude.ln(), p.slope.ln(), p.center, p.offset],
            Parametrization::UnitShape => vec![p.slope.ln(), p.center],
        }
    }

    pub(crate) fn decode(&self, x: &[f64]) -> SigmoidParams {
        match self {
            Parametrization::Full => SigmoidParams {
                amplitude: x[0].exp(),
                slope: x[1].exp(),
                center: x[2],
                offset: x[3],
            },
            Parametrization::UnitShape => SigmoidParams::unit(x[0].exp(), x[1]),
        }
    }

    pub(crate) fn step(&self, center_step: f64, offset_step: f64) -> Vec<f64> {
        match self {
            Parametrization::Full => vec![0.1, 0.2, center_step, offset_step],
            Parametrization::UnitShape => vec![0.2, center_step],
        }
    }
}

pub(crate) fn valid_params(p: &SigmoidParams) -> bool {
    p.validate().is_ok()
}

/// Minimizes a sigmoid-block objective from the incoming estimate plus random
/// restarts; never returns a point worse than `incoming`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn minimize_sigmoid_block<F>(
    objective: F,
    incoming: &SigmoidParams,
    param: Parametrization,
    priors: &SigmoidPriors,
    restart_box: &RestartBox,
    rng: &mut ChaCha8Rng,
    optimizer: &OptimizerSpec,
    center_step: f64,
    offset_step: f64,
) -> Result<SigmoidParams>
where
    F: Fn(&SigmoidParams) -> f64,
{
    let mut starts = vec![param.encode(incoming)];
    for _ in 0..optimizer.restarts {
        let mut s = priors.sample(rng, restart_box);
        if matches!(param, Parametrization::UnitShape) {
            s.amplitude = 1.0;
            s.offset = 0.0;
        }
        starts.push(param.encode(&s));
    }
    let f = |x: &[f64]| {
        let p = param.decode(x);
        if !valid_params(&p) {
            return f64::INFINITY;
        }
        objective(&p)
    };
    let best = optimizer
        .simplex()
        .multistart(f, &starts, &param.step(center_step, offset_step))?;
    let candidate = param.decode(&best.x);
    let f_in = objective(incoming);
    let f_new = objective(&candidate);
    if !f_new.is_finite() && !f_in.is_finite() {
        return Err(DktError::SolverFailure("trajectory objective is non-finite".into()));
    }
    if f_new < f_in || !f_in.is_finite() {
        Ok(candidate)
    } else {
        Ok(*incoming)
    }
}

/// Gammas for the measurements of biomarker `k` under the current stages.
fn trajectory_inputs(k: usize, index: &FitIndex, data: &CohortDataset, state: &FittedModel, config: &ModelConfig) -> Vec<(f64, f64)> {
    let l = config.unit_of(k);
    index.by_biomarker[k]
        .iter()
        .map(|&o| {
            let o = &index.obs[o];
            let d = data.subjects[o.subject].disease;
            (sigmoid_eval(state.beta[o.subject] + o.years, &state.lambda[d][l]), o.value)
        })
        .collect()
}

fn fit_trajectory_indexed(
    k: usize,
    index: &FitIndex,
    data: &CohortDataset,
    state: &FittedModel,
    config: &ModelConfig,
    sweep: u64,
) -> Result<SigmoidParams> {
    if index.by_biomarker[k].is_empty() {
        return Err(DktError::Precondition(format!(
            "biomarker `{}` has no measurements",
            config.biomarkers[k]
        )));
    }
    let points = trajectory_inputs(k, index, data, state, config);
    let w = 0.5 / state.epsilon[k].max(NOISE_FLOOR);
    let priors = &config.priors.theta;
    let objective = |p: &SigmoidParams| {
        let sse: f64 = points
            .iter()
            .map(|&(g, y)| {
                let r = y - sigmoid_eval(g, p);
                r * r
            })
            .sum();
        w * sse + priors.penalty(p)
    };
    let mut rng = block_rng(config.optimizer.seed, FAMILY_THETA, sweep, k as u64);
    minimize_sigmoid_block(
        objective,
        &state.theta[k],
        Parametrization::Full,
        priors,
        &THETA_BOX,
        &mut rng,
        &config.optimizer,
        0.05,
        0.05,
    )
}

fn noise_indexed(k: usize, index: &FitIndex, data: &CohortDataset, state: &FittedModel, config: &ModelConfig) -> Result<f64> {
    let list = &index.by_biomarker[k];
    if list.is_empty() {
        return Err(DktError::Precondition(format!(
            "biomarker `{}` has no measurements",
            config.biomarkers[k]
        )));
    }
    let sse: f64 = list
        .iter()
        .map(|&o| {
            let o = &index.obs[o];
            let r = o.value - predict_obs(o, data, state, config);
            r * r
        })
        .sum();
    Ok(sse / list.len() as f64)
}

fn fit_dysfunction_indexed(
    d: usize,
    l: usize,
    index: &FitIndex,
    state: &FittedModel,
    config: &ModelConfig,
    sweep: u64,
) -> Result<SigmoidParams> {
    let list = &index.by_block[d][l];
    if list.is_empty() {
        return Err(DktError::EmptyBlock { disease: d, unit: l });
    }
    let w = weights(&state.epsilon);
    let points: Vec<(f64, f64, usize)> = list
        .iter()
        .map(|&o| {
            let o = &index.obs[o];
            (state.beta[o.subject] + o.years, o.value, o.biomarker)
        })
        .collect();
    let priors = &config.priors.lambda;
    let objective = |p: &SigmoidParams| {
        let mut total = 0.0;
        for &(s, y, k) in &points {
            let r = y - sigmoid_eval(sigmoid_eval(s, p), &state.theta[k]);
            total += w[k] * r * r;
        }
        total + priors.penalty(p)
    };
    let param = if config.fixed_lambda_shape {
        Parametrization::UnitShape
    } else {
        Parametrization::Full
    };
    let mut incoming = state.lambda[d][l];
    if config.fixed_lambda_shape {
        incoming.amplitude = 1.0;
        incoming.offset = 0.0;
    }
    let mut rng = block_rng(config.optimizer.seed, FAMILY_LAMBDA, sweep, (d as u64) << 32 | l as u64);
    minimize_sigmoid_block(
        objective,
        &incoming,
        param,
        priors,
        &STAGE_BOX,
        &mut rng,
        &config.optimizer,
        1.0,
        0.05,
    )
}

/// Interval scanned by the time-shift grid.
pub(crate) fn shift_support(config: &ModelConfig, betas: &[f64]) -> (f64, f64) {
    shift_support_for(&config.optimizer, &config.priors.beta, betas)
}

pub(crate) fn shift_support_for(optimizer: &OptimizerSpec, prior: &Prior, betas: &[f64]) -> (f64, f64) {
    if let Some([lo, hi]) = optimizer.shift_support {
        return (lo, hi);
    }
    if let Prior::Gaussian { mean, std } = *prior {
        return (mean - 3.0 * std, mean + 3.0 * std);
    }
    let lo = betas.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = betas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo.is_finite() && hi > lo {
        let pad = 0.5 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (-30.0, 30.0)
    }
}

/// Grid-seeded 1-D minimization with golden-section refinement. Among grid
/// seeds tied with the best value, the one nearest `reference` wins.
pub(crate) fn shift_argmin<F>(objective: F, support: (f64, f64), grid: usize, reference: f64) -> (f64, f64)
where
    F: Fn(f64) -> f64,
{
    let (lo, hi) = support;
    let h = (hi - lo) / (grid - 1) as f64;
    let seeds: Vec<(f64, f64)> = (0..grid)
        .map(|g| {
            let x = if g + 1 == grid { hi } else { lo + h * g as f64 };
            let fx = objective(x);
            (x, if fx.is_nan() { f64::INFINITY } else { fx })
        })
        .collect();
    let f_best = seeds.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let tie = 1e-12 * f_best.abs().max(1.0);
    let &(x0, f0) = seeds
        .iter()
        .filter(|s| s.1 <= f_best + tie)
        .min_by(|a, b| {
            (a.0 - reference)
                .abs()
                .total_cmp(&(b.0 - reference).abs())
                .then(a.0.total_cmp(&b.0))
        })
        .expect("grid is non-empty");
    let (x1, f1) = crate::optim::golden_section(&objective, x0 - h, x0 + h, 1e-10);
    if f1 < f0 - tie {
        (x1, f1)
    } else {
        (x0, f0)
    }
}

/// Tie-break target of the shift search: the prior mean, else the middle of the support.
pub(crate) fn shift_reference(prior: &Prior, support: (f64, f64)) -> f64 {
    prior.mean().unwrap_or(0.5 * (support.0 + support.1))
}

/// (stage offset in years, value, weight, theta, lambda) per measurement of one subject.
type ShiftTerm<'a> = (f64, f64, f64, &'a SigmoidParams, &'a SigmoidParams);

fn shift_objective<'a>(terms: &'a [ShiftTerm<'a>], prior: &'a Prior) -> impl Fn(f64) -> f64 + 'a {
    move |beta: f64| {
        let mut total = 0.0;
        for &(t, y, w, theta, lambda) in terms {
            let r = y - sigmoid_eval(sigmoid_eval(beta + t, lambda), theta);
            total += w * r * r;
        }
        total + prior.penalty(beta)
    }
}

fn fit_shift_indexed(
    i: usize,
    index: &FitIndex,
    data: &CohortDataset,
    state: &FittedModel,
    config: &ModelConfig,
    support: (f64, f64),
) -> Result<f64> {
    let list = &index.by_subject[i];
    if list.is_empty() {
        return Err(DktError::Precondition(format!(
            "subject `{}` has no measurements",
            data.subjects[i].id
        )));
    }
    let w = weights(&state.epsilon);
    let d = data.subjects[i].disease;
    let terms: Vec<ShiftTerm> = list
        .iter()
        .map(|&o| {
            let o = &index.obs[o];
            let k = o.biomarker;
            (o.years, o.value, w[k], &state.theta[k], &state.lambda[d][config.unit_of(k)])
        })
        .collect();
    let objective = shift_objective(&terms, &config.priors.beta);
    let (x, fx) = shift_argmin(
        &objective,
        support,
        config.optimizer.shift_grid,
        shift_reference(&config.priors.beta, support),
    );
    let incoming = state.beta[i];
    if fx < objective(incoming) {
        Ok(x)
    } else {
        Ok(incoming)
    }
}

fn rank_shifts(data: &CohortDataset, config: &ModelConfig) -> Vec<f64> {
    rank_shifts_grouped(data, &config.priors.beta, |s| s.disease)
}

/// Ranks subjects by mean measured value within each group and spreads the
/// ranks over the prior mean ± one std. Ties go by subject id.
pub(crate) fn rank_shifts_grouped(data: &CohortDataset, prior: &Prior, group: impl Fn(&crate::model::Subject) -> usize) -> Vec<f64> {
    let (lo, hi) = match *prior {
        Prior::Gaussian { mean, std } => (mean - std, mean + std),
        Prior::Flat => (-10.0, 10.0),
    };
    let mut sums = vec![(0.0, 0usize); data.subjects.len()];
    for m in &data.measurements {
        sums[m.subject].0 += m.value;
        sums[m.subject].1 += 1;
    }
    let mut groups: Vec<usize> = data.subjects.iter().map(&group).collect();
    groups.sort_unstable();
    groups.dedup();
    let mut beta = vec![0.5 * (lo + hi); data.subjects.len()];
    for g in groups {
        let mut members: Vec<(f64, &str, usize)> = data
            .subjects
            .iter()
            .enumerate()
            .filter(|(i, s)| group(s) == g && sums[*i].1 > 0)
            .map(|(i, s)| (sums[i].0 / sums[i].1 as f64, s.id.as_str(), i))
            .collect();
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        let n = members.len();
        for (r, &(_, _, i)) in members.iter().enumerate() {
            beta[i] = if n > 1 {
                lo + (hi - lo) * r as f64 / (n - 1) as f64
            } else {
                0.5 * (lo + hi)
            };
        }
    }
    beta
}

/// Initial time shifts: subjects ranked within their disease by mean
/// abnormality and spread evenly over one prior standard deviation either
/// side of the prior mean (±10 years when the prior is flat).
pub fn initial_shifts(data: &CohortDataset, config: &ModelConfig) -> Result<Vec<f64>> {
    validate_for_fit(data, config)?;
    Ok(rank_shifts(data, config))
}

fn validate_for_fit(data: &CohortDataset, config: &ModelConfig) -> Result<()> {
    check_compatible(data, config)?;
    if data.is_empty() {
        return Err(DktError::Precondition("dataset has no measurements".into()));
    }
    for (k, &count) in data.counts_per_biomarker().iter().enumerate() {
        if count < MIN_MEASUREMENTS {
            return Err(DktError::InsufficientData {
                biomarker: config.biomarkers[k].clone(),
                count,
                required: MIN_MEASUREMENTS,
            });
        }
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Builds the starting state: rank-based shifts, identity-like dysfunction
/// trajectories centred on each disease's median stage, biomarker
/// trajectories fitted against those dysfunction scores, and residual noise.
pub fn initialize(data: &CohortDataset, config: &ModelConfig) -> Result<FittedModel> {
    validate_for_fit(data, config)?;
    let index = FitIndex::new(data, config);
    let beta = rank_shifts(data, config);
    let k_count = config.biomarkers.len();

    let prior_mean = config.priors.lambda_prior_mean();
    let lambda: Vec<Vec<SigmoidParams>> = (0..config.diseases.len())
        .map(|d| {
            let stages: Vec<f64> = index.by_block[d]
                .iter()
                .flatten()
                .map(|&o| beta[index.obs[o].subject] + index.obs[o].years)
                .collect();
            (0..config.units)
                .map(|l| {
                    if index.by_block[d][l].is_empty() || stages.is_empty() {
                        prior_mean
                    } else {
                        SigmoidParams::unit(0.5, median(stages.clone()))
                    }
                })
                .collect()
        })
        .collect();

    let mut state = FittedModel {
        theta: Vec::with_capacity(k_count),
        lambda,
        subject_ids: data.subjects.iter().map(|s| s.id.clone()).collect(),
        beta,
        epsilon: vec![1.0; k_count],
        trace: Vec::new(),
    };
    // provisional trajectories and variances from the raw spread of each biomarker
    for k in 0..k_count {
        let values: Vec<f64> = index.by_biomarker[k].iter().map(|&o| index.obs[o].value).collect();
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        state.theta.push(SigmoidParams {
            amplitude: (hi - lo).max(0.05),
            slope: 5.0,
            center: 0.5,
            offset: lo,
        });
        state.epsilon[k] = var.max(NOISE_FLOOR);
    }
    let theta: Vec<SigmoidParams> = (0..k_count)
        .into_par_iter()
        .map(|k| fit_trajectory_indexed(k, &index, data, &state, config, 0))
        .collect::<Result<_>>()?;
    state.theta = theta;
    for k in 0..k_count {
        state.epsilon[k] = noise_indexed(k, &index, data, &state, config)?;
    }
    state.trace = vec![objective_indexed(&index, data, &state, config)];
    Ok(state)
}

/// Refits the trajectory of biomarker `k` with everything else held fixed.
pub fn fit_trajectory(k: usize, state: &FittedModel, data: &CohortDataset, config: &ModelConfig) -> Result<SigmoidParams> {
    check_compatible(data, config)?;
    check_biomarker(k, config)?;
    let index = FitIndex::new(data, config);
    fit_trajectory_indexed(k, &index, data, state, config, 0)
}

/// Mean squared residual of biomarker `k` under the current parameters.
pub fn update_noise(k: usize, state: &FittedModel, data: &CohortDataset, config: &ModelConfig) -> Result<f64> {
    check_compatible(data, config)?;
    check_biomarker(k, config)?;
    let index = FitIndex::new(data, config);
    noise_indexed(k, &index, data, state, config)
}

/// Refits the dysfunction trajectory of disease `d` in unit `l`.
pub fn fit_dysfunction(d: usize, l: usize, state: &FittedModel, data: &CohortDataset, config: &ModelConfig) -> Result<SigmoidParams> {
    check_compatible(data, config)?;
    if d >= config.diseases.len() || l >= config.units {
        return Err(DktError::Precondition(format!("no block (disease {d}, unit {l})")));
    }
    let index = FitIndex::new(data, config);
    fit_dysfunction_indexed(d, l, &index, state, config, 0)
}

/// Refits the time shift of subject `i`.
pub fn fit_subject_shift(i: usize, state: &FittedModel, data: &CohortDataset, config: &ModelConfig) -> Result<f64> {
    check_compatible(data, config)?;
    if i >= data.subjects.len() {
        return Err(DktError::Precondition(format!("no subject {i}")));
    }
    let index = FitIndex::new(data, config);
    let support = shift_support(config, &state.beta);
    fit_shift_indexed(i, &index, data, state, config, support)
}

fn check_biomarker(k: usize, config: &ModelConfig) -> Result<()> {
    if k >= config.biomarkers.len() {
        return Err(DktError::UnknownBiomarker(format!("#{k}")));
    }
    Ok(())
}

/// Initializes and runs sweeps until the objective decrease drops below
/// `sweep_tol` or `max_sweeps` is reached.
pub fn fit(data: &CohortDataset, config: &ModelConfig) -> Result<(FittedModel, FitDiagnostics)> {
    let init = initialize(data, config)?;
    fit_from(data, config, init, None)
}

/// Runs sweeps from a given state. The observer, when present, sees the
/// state after every single block update.
pub fn fit_from(
    data: &CohortDataset,
    config: &ModelConfig,
    init: FittedModel,
    mut observer: Option<&mut dyn FnMut(BlockUpdate, &FittedModel)>,
) -> Result<(FittedModel, FitDiagnostics)> {
    validate_for_fit(data, config)?;
    let index = FitIndex::new(data, config);
    let mut state = init;
    if config.fixed_lambda_shape {
        for l in state.lambda.iter_mut().flatten() {
            l.amplitude = 1.0;
            l.offset = 0.0;
        }
    }
    let mut objective = objective_indexed(&index, data, &state, config);
    state.trace = vec![objective];

    let degenerate: Vec<(usize, usize)> = (0..config.diseases.len())
        .flat_map(|d| (0..config.units).map(move |l| (d, l)))
        .filter(|&(d, l)| index.by_block[d][l].is_empty())
        .collect();
    let prior_mean = config.priors.lambda_prior_mean();
    for &(d, l) in &degenerate {
        state.lambda[d][l] = prior_mean;
    }

    let mut notify = |event: BlockUpdate, state: &FittedModel| {
        if let Some(obs) = observer.as_mut() {
            obs(event, state);
        }
    };

    let k_count = config.biomarkers.len();
    let blocks: Vec<(usize, usize)> = (0..config.diseases.len())
        .flat_map(|d| (0..config.units).map(move |l| (d, l)))
        .filter(|&(d, l)| !index.by_block[d][l].is_empty())
        .collect();
    // id order keeps the joint step independent of the dataset's subject order
    let subjects: Vec<usize> = index
        .subject_order
        .iter()
        .copied()
        .filter(|&i| !index.by_subject[i].is_empty())
        .collect();

    let layout = refine::Layout::new(config, &blocks, &subjects, data.subjects.len());

    let mut converged = false;
    let mut sweeps = 0;
    let mut improvements = BlockImprovements::default();

    while sweeps < config.optimizer.max_sweeps {
        sweeps += 1;
        let sweep = sweeps as u64;
        let start = objective;

        // each noise variance depends only on its own trajectory, so applying
        // all trajectories first gives the same state as interleaving
        let theta: Vec<SigmoidParams> = (0..k_count)
            .into_par_iter()
            .map(|k| fit_trajectory_indexed(k, &index, data, &state, config, sweep))
            .collect::<Result<_>>()?;
        for (k, t) in theta.into_iter().enumerate() {
            state.theta[k] = t;
            notify(BlockUpdate::Trajectory(k), &state);
        }
        let theta_done = objective_indexed(&index, data, &state, config);
        for k in 0..k_count {
            state.epsilon[k] = noise_indexed(k, &index, data, &state, config)?;
            notify(BlockUpdate::Noise(k), &state);
        }
        let noise_done = objective_indexed(&index, data, &state, config);

        let lambda: Vec<SigmoidParams> = blocks
            .par_iter()
            .map(|&(d, l)| fit_dysfunction_indexed(d, l, &index, &state, config, sweep))
            .collect::<Result<_>>()?;
        for (&(d, l), lam) in blocks.iter().zip(lambda) {
            state.lambda[d][l] = lam;
            notify(BlockUpdate::Dysfunction(d, l), &state);
        }
        let lambda_done = objective_indexed(&index, data, &state, config);

        let support = shift_support(config, &state.beta);
        let betas: Vec<f64> = subjects
            .par_iter()
            .map(|&i| fit_shift_indexed(i, &index, data, &state, config, support))
            .collect::<Result<_>>()?;
        for (&i, b) in subjects.iter().zip(betas) {
            state.beta[i] = b;
            notify(BlockUpdate::Shift(i), &state);
        }
        let beta_done = objective_indexed(&index, data, &state, config);

        if config.optimizer.joint_refinement {
            if let Some(refined) = refine::refine(&layout, &index, data, &state, config) {
                state = refined;
                notify(BlockUpdate::Joint, &state);
            }
        }
        objective = objective_indexed(&index, data, &state, config);
        state.trace.push(objective);

        improvements = BlockImprovements {
            theta: start - theta_done,
            noise: theta_done - noise_done,
            lambda: noise_done - lambda_done,
            beta: lambda_done - beta_done,
            joint: beta_done - objective,
        };
        if start - objective < config.optimizer.sweep_tol {
            converged = true;
            break;
        }
    }

    let diagnostics = FitDiagnostics {
        sweeps,
        trace: state.trace.clone(),
        last_improvement: improvements,
        converged,
        degenerate_blocks: degenerate,
    };
    Ok((state, diagnostics))
}

/// One measurement of a subject being staged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub months: f64,
    pub biomarker: usize,
    pub value: f64,
}

/// Estimates the time shift of a subject from any subset of its measurements
/// with the model frozen; the same search as the in-fit shift update.
pub fn stage_subject(model: &FittedModel, config: &ModelConfig, disease: usize, observations: &[Observation]) -> Result<f64> {
    if observations.is_empty() {
        return Err(DktError::Precondition("cannot stage a subject without measurements".into()));
    }
    if disease >= model.lambda.len() {
        return Err(DktError::UnknownDisease(format!("#{disease}")));
    }
    if let Some(o) = observations.iter().find(|o| o.biomarker >= model.theta.len()) {
        return Err(DktError::UnknownBiomarker(format!("#{}", o.biomarker)));
    }
    let w = weights(&model.epsilon);
    // same canonical order as the fit index
    let mut sorted = observations.to_vec();
    sorted.sort_by(|a, b| {
        a.months
            .total_cmp(&b.months)
            .then(a.biomarker.cmp(&b.biomarker))
            .then(a.value.total_cmp(&b.value))
    });
    let terms: Vec<ShiftTerm> = sorted
        .iter()
        .map(|o| {
            let k = o.biomarker;
            (
                o.months / MONTHS_PER_YEAR,
                o.value,
                w[k],
                &model.theta[k],
                &model.lambda[disease][config.unit_of(k)],
            )
        })
        .collect();
    let support = shift_support(config, &model.beta);
    let objective = shift_objective(&terms, &config.priors.beta);
    let (x, _) = shift_argmin(
        &objective,
        support,
        config.optimizer.shift_grid,
        shift_reference(&config.priors.beta, support),
    );
    Ok(x)
}

/// Stages every subject of `data`, optionally using only the listed biomarkers.
/// Subjects without usable measurements get `None`.
pub fn stage_dataset(
    model: &FittedModel,
    config: &ModelConfig,
    data: &CohortDataset,
    biomarkers: Option<&[usize]>,
) -> Result<Vec<Option<f64>>> {
    let mut per_subject: Vec<Vec<Observation>> = vec![Vec::new(); data.subjects.len()];
    for m in &data.measurements {
        if biomarkers.is_some_and(|b| !b.contains(&m.biomarker)) {
            continue;
        }
        per_subject[m.subject].push(Observation {
            months: data.months(m),
            biomarker: m.biomarker,
            value: m.value,
        });
    }
    per_subject
        .par_iter()
        .enumerate()
        .map(|(i, obs)| {
            if obs.is_empty() {
                Ok(None)
            } else {
                stage_subject(model, config, data.subjects[i].disease, obs).map(Some)
            }
        })
        .collect()
}

/// Predicted normalized value of biomarker `k` for a subject of `disease`.
pub fn predict_missing(model: &FittedModel, config: &ModelConfig, disease: usize, beta: f64, months: f64, k: usize) -> Result<f64> {
    if disease >= model.lambda.len() {
        return Err(DktError::UnknownDisease(format!("#{disease}")));
    }
    if k >= model.theta.len() {
        return Err(DktError::UnknownBiomarker(format!("#{k}")));
    }
    Ok(model.predict(config, disease, beta, months, k))
}
