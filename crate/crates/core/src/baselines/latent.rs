//! Single-level latent stage model: every biomarker follows its own sigmoid
//! directly in disease stage, with one stage axis shared by all diseases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DktError, Result};
use crate::fit::refine::{accumulate, curve_grad, damped_gauss_newton, prior_rows, sigmoid_prior_rows};
use crate::fit::{
    block_rng, minimize_sigmoid_block, rank_shifts_grouped, shift_argmin, shift_reference, shift_support_for,
    valid_params, weights, Observation, OptimizerSpec, Parametrization, Prior, SigmoidPriors, FAMILY_LATENT,
    MIN_MEASUREMENTS, NOISE_FLOOR, STAGE_BOX,
};
use nalgebra::{DMatrix, DVector};
use crate::model::{CohortDataset, ModelConfig, MONTHS_PER_YEAR};
use crate::sigmoid::{sigmoid_eval, SigmoidParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentConfig {
    pub biomarkers: Vec<String>,
    pub trajectory_priors: SigmoidPriors,
    pub beta_prior: Prior,
    pub optimizer: OptimizerSpec,
}

impl LatentConfig {
    /// Trajectories live on the stage axis, so they take the stage-scale
    /// priors of the dysfunction curves for slope and center; amplitude and
    /// offset stay free.
    pub fn from_model(config: &ModelConfig) -> Self {
        let lambda = config.priors.lambda;
        LatentConfig {
            biomarkers: config.biomarkers.clone(),
            trajectory_priors: SigmoidPriors {
                amplitude: Prior::Flat,
                slope: lambda.slope,
                center: lambda.center,
                offset: Prior::Flat,
            },
            beta_prior: config.priors.beta,
            optimizer: config.optimizer.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStageModel {
    pub theta: Vec<SigmoidParams>,
    pub subject_ids: Vec<String>,
    pub beta: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

#[derive(Clone, Copy)]
struct Obs {
    subject: usize,
    years: f64,
    biomarker: usize,
    value: f64,
}

struct Index {
    obs: Vec<Obs>,
    /// Subject indices sorted by id.
    order: Vec<usize>,
    by_biomarker: Vec<Vec<usize>>,
    by_subject: Vec<Vec<usize>>,
}

impl Index {
    fn new(data: &CohortDataset) -> Index {
        let mut order: Vec<usize> = (0..data.subjects.len()).collect();
        order.sort_by(|&a, &b| data.subjects[a].id.cmp(&data.subjects[b].id));
        let mut rank = vec![0; order.len()];
        for (r, &i) in order.iter().enumerate() {
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
        let mut by_biomarker = vec![Vec::new(); data.biomarkers.len()];
        let mut by_subject = vec![Vec::new(); data.subjects.len()];
        for (i, o) in obs.iter().enumerate() {
            by_biomarker[o.biomarker].push(i);
            by_subject[o.subject].push(i);
        }
        Index {
            obs,
            order,
            by_biomarker,
            by_subject,
        }
    }
}

fn objective(index: &Index, m: &LatentStageModel, config: &LatentConfig, subjects: &[usize]) -> f64 {
    let mut total = 0.0;
    for (k, list) in index.by_biomarker.iter().enumerate() {
        if list.is_empty() {
            continue;
        }
        let eps = m.epsilon[k].max(NOISE_FLOOR);
        let sse: f64 = list
            .iter()
            .map(|&o| {
                let o = &index.obs[o];
                (o.value - sigmoid_eval(m.beta[o.subject] + o.years, &m.theta[k])).powi(2)
            })
            .sum();
        total += sse / (2.0 * eps) + 0.5 * list.len() as f64 * (2.0 * std::f64::consts::PI * eps).ln();
    }
    total += m.theta.iter().map(|t| config.trajectory_priors.penalty(t)).sum::<f64>();
    total + subjects.iter().map(|&i| config.beta_prior.penalty(m.beta[i])).sum::<f64>()
}

fn fit_trajectory(k: usize, index: &Index, m: &LatentStageModel, config: &LatentConfig, sweep: u64) -> Result<SigmoidParams> {
    let w = weights(&m.epsilon)[k];
    let points: Vec<(f64, f64)> = index.by_biomarker[k]
        .iter()
        .map(|&o| {
            let o = &index.obs[o];
            (m.beta[o.subject] + o.years, o.value)
        })
        .collect();
    let priors = &config.trajectory_priors;
    let f = |p: &SigmoidParams| {
        let sse: f64 = points.iter().map(|&(s, y)| (y - sigmoid_eval(s, p)).powi(2)).sum();
        w * sse + priors.penalty(p)
    };
    let mut rng = block_rng(config.optimizer.seed, FAMILY_LATENT, sweep, k as u64);
    minimize_sigmoid_block(
        f,
        &m.theta[k],
        Parametrization::Full,
        priors,
        &STAGE_BOX,
        &mut rng,
        &config.optimizer,
        1.0,
        0.05,
    )
}

fn noise(k: usize, index: &Index, m: &LatentStageModel) -> f64 {
    let list = &index.by_biomarker[k];
    if list.is_empty() {
        return m.epsilon[k];
    }
    let sse: f64 = list
        .iter()
        .map(|&o| {
            let o = &index.obs[o];
            (o.value - sigmoid_eval(m.beta[o.subject] + o.years, &m.theta[k])).powi(2)
        })
        .sum();
    sse / list.len() as f64
}

type ShiftTerm<'a> = (f64, f64, f64, &'a SigmoidParams);

/// Weighted misfit of one subject at shift `beta`, plus the shift prior.
fn shift_cost(terms: &[ShiftTerm], prior: &Prior, beta: f64) -> f64 {
    let sse: f64 = terms
        .iter()
        .map(|&(t, y, w, p)| w * (y - sigmoid_eval(beta + t, p)).powi(2))
        .sum();
    sse + prior.penalty(beta)
}

fn best_shift(terms: &[ShiftTerm], config: &LatentConfig, support: (f64, f64)) -> (f64, f64) {
    let prior = &config.beta_prior;
    shift_argmin(
        |beta| shift_cost(terms, prior, beta),
        support,
        config.optimizer.shift_grid,
        shift_reference(prior, support),
    )
}

fn fit_shift(i: usize, index: &Index, m: &LatentStageModel, config: &LatentConfig, support: (f64, f64)) -> f64 {
    let w = weights(&m.epsilon);
    let terms: Vec<ShiftTerm> = index.by_subject[i]
        .iter()
        .map(|&o| {
            let o = &index.obs[o];
            (o.years, o.value, w[o.biomarker], &m.theta[o.biomarker])
        })
        .collect();
    let (x, fx) = best_shift(&terms, config, support);
    if fx < shift_cost(&terms, &config.beta_prior, m.beta[i]) {
        x
    } else {
        m.beta[i]
    }
}

/// Packed coordinates: four encoded trajectory parameters per biomarker,
/// then one shift per active subject.
fn pack(m: &LatentStageModel, subjects: &[usize]) -> Vec<f64> {
    let mut x: Vec<f64> = m.theta.iter().flat_map(|t| Parametrization::Full.encode(t)).collect();
    x.extend(subjects.iter().map(|&i| m.beta[i]));
    x
}

fn unpack(x: &[f64], template: &LatentStageModel, subjects: &[usize]) -> LatentStageModel {
    let mut m = template.clone();
    let k_count = m.theta.len();
    for (k, t) in m.theta.iter_mut().enumerate() {
        *t = Parametrization::Full.decode(&x[4 * k..4 * k + 4]);
    }
    for (slot, &i) in subjects.iter().enumerate() {
        m.beta[i] = x[4 * k_count + slot];
    }
    m
}

fn normal_equations(index: &Index, m: &LatentStageModel, config: &LatentConfig, slot: &[Option<usize>]) -> (DMatrix<f64>, DVector<f64>) {
    let k_count = m.theta.len();
    let n = 4 * k_count + slot.iter().flatten().count();
    let mut jtj = DMatrix::zeros(n, n);
    let mut jtr = DVector::zeros(n);
    let mut row = Vec::with_capacity(5);
    for o in &index.obs {
        let Some(b) = slot[o.subject] else { continue };
        let w = 1.0 / m.epsilon[o.biomarker].max(NOISE_FLOOR).sqrt();
        let (pred, grad, ds) = curve_grad(&m.theta[o.biomarker], m.beta[o.subject] + o.years, false);
        row.clear();
        row.extend((0..4).map(|c| (4 * o.biomarker + c, -w * grad[c])));
        row.push((4 * k_count + b, -w * ds));
        accumulate(&mut jtj, &mut jtr, &row, w * (o.value - pred));
    }
    for (k, t) in m.theta.iter().enumerate() {
        sigmoid_prior_rows(&config.trajectory_priors, t, 4 * k, false, &mut jtj, &mut jtr);
    }
    for (i, s) in slot.iter().enumerate() {
        if let Some(s) = s {
            prior_rows(&config.beta_prior, 4 * k_count + s, m.beta[i], false, &mut jtj, &mut jtr);
        }
    }
    (jtj, jtr)
}

/// Damped Gauss-Newton over all trajectories and shifts with the noise fixed.
fn joint_refine(index: &Index, m: &LatentStageModel, config: &LatentConfig, subjects: &[usize]) -> Option<LatentStageModel> {
    let mut slot = vec![None; m.beta.len()];
    for (s, &i) in subjects.iter().enumerate() {
        slot[i] = Some(s);
    }
    let normal = |x: &[f64]| normal_equations(index, &unpack(x, m, subjects), config, &slot);
    let objective = |x: &[f64]| {
        let trial = unpack(x, m, subjects);
        if trial.theta.iter().all(valid_params) && trial.beta.iter().all(|b| b.is_finite()) {
            objective(index, &trial, config, subjects)
        } else {
            f64::INFINITY
        }
    };
    damped_gauss_newton(pack(m, subjects), normal, objective).map(|(x, _)| unpack(&x, m, subjects))
}

fn check(data: &CohortDataset, config: &LatentConfig) -> Result<()> {
    if data.biomarkers != config.biomarkers {
        return Err(DktError::Schema(format!(
            "dataset biomarkers {:?} differ from the configuration {:?}",
            data.biomarkers, config.biomarkers
        )));
    }
    config.optimizer.validate()?;
    config.trajectory_priors.validate()?;
    config.beta_prior.validate()?;
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

/// Starting state: rank-based shifts as in the transfer model (one group
/// for all subjects), trajectories spanning each biomarker's observed range
/// centred on the median stage, and the raw variance as noise.
pub fn latent_initialize(data: &CohortDataset, config: &LatentConfig) -> Result<LatentStageModel> {
    check(data, config)?;
    Ok(initial_state(&Index::new(data), data, config))
}

fn initial_state(index: &Index, data: &CohortDataset, config: &LatentConfig) -> LatentStageModel {
    let beta = rank_shifts_grouped(data, &config.beta_prior, |_| 0);
    let mut stages: Vec<f64> = index.obs.iter().map(|o| beta[o.subject] + o.years).collect();
    stages.sort_by(f64::total_cmp);
    let n = stages.len();
    let mid = if n % 2 == 1 {
        stages[n / 2]
    } else {
        0.5 * (stages[n / 2 - 1] + stages[n / 2])
    };
    let mut theta = Vec::with_capacity(data.biomarkers.len());
    let mut epsilon = Vec::with_capacity(data.biomarkers.len());
    for list in &index.by_biomarker {
        let vals: Vec<f64> = list.iter().map(|&o| index.obs[o].value).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        theta.push(SigmoidParams {
            amplitude: (hi - lo).max(0.05),
            slope: 0.5,
            center: mid,
            offset: lo,
        });
        epsilon.push(var.max(NOISE_FLOOR));
    }
    let mut m = LatentStageModel {
        theta,
        subject_ids: data.subjects.iter().map(|s| s.id.clone()).collect(),
        beta,
        epsilon,
        trace: Vec::new(),
        sweeps: 0,
        converged: false,
    };
    let subjects = active_subjects(index);
    m.trace.push(objective(index, &m, config, &subjects));
    m
}

fn active_subjects(index: &Index) -> Vec<usize> {
    index
        .order
        .iter()
        .copied()
        .filter(|&i| !index.by_subject[i].is_empty())
        .collect()
}

/// Alternates trajectory, noise and shift updates until the objective
/// decrease per sweep falls below the tolerance.
pub fn latent_stage_fit(data: &CohortDataset, config: &LatentConfig) -> Result<LatentStageModel> {
    check(data, config)?;
    let index = Index::new(data);
    let subjects = active_subjects(&index);
    let k_count = data.biomarkers.len();
    let mut m = initial_state(&index, data, config);
    let mut f = m.trace[0];

    while m.sweeps < config.optimizer.max_sweeps {
        m.sweeps += 1;
        let sweep = m.sweeps as u64;
        let start = f;
        let theta: Vec<SigmoidParams> = (0..k_count)
            .into_par_iter()
            .map(|k| fit_trajectory(k, &index, &m, config, sweep))
            .collect::<Result<_>>()?;
        m.theta = theta;
        for k in 0..k_count {
            m.epsilon[k] = noise(k, &index, &m);
        }
        let support = shift_support_for(&config.optimizer, &config.beta_prior, &m.beta);
        let betas: Vec<f64> = subjects
            .par_iter()
            .map(|&i| fit_shift(i, &index, &m, config, support))
            .collect();
        for (&i, b) in subjects.iter().zip(betas) {
            m.beta[i] = b;
        }
        if config.optimizer.joint_refinement {
            if let Some(refined) = joint_refine(&index, &m, config, &subjects) {
                m = refined;
            }
        }
        f = objective(&index, &m, config, &subjects);
        m.trace.push(f);
        if start - f < config.optimizer.sweep_tol {
            m.converged = true;
            break;
        }
    }
    Ok(m)
}

impl LatentStageModel {
    pub fn predict(&self, beta: f64, months: f64, k: usize) -> f64 {
        sigmoid_eval(beta + months / MONTHS_PER_YEAR, &self.theta[k])
    }

    /// MAP shift of a new subject from its observations.
    pub fn stage(&self, config: &LatentConfig, observations: &[Observation]) -> Result<f64> {
        if observations.is_empty() {
            return Err(DktError::Precondition("cannot stage a subject without measurements".into()));
        }
        if let Some(o) = observations.iter().find(|o| o.biomarker >= self.theta.len()) {
            return Err(DktError::UnknownBiomarker(format!("#{}", o.biomarker)));
        }
        let w = weights(&self.epsilon);
        let mut sorted = observations.to_vec();
        sorted.sort_by(|a, b| {
            a.months
                .total_cmp(&b.months)
                .then(a.biomarker.cmp(&b.biomarker))
                .then(a.value.total_cmp(&b.value))
        });
        let terms: Vec<ShiftTerm> = sorted
            .iter()
            .map(|o| (o.months / MONTHS_PER_YEAR, o.value, w[o.biomarker], &self.theta[o.biomarker]))
            .collect();
        let support = shift_support_for(&config.optimizer, &config.beta_prior, &self.beta);
        Ok(best_shift(&terms, config, support).0)
    }
}
