//! Damped Gauss-Newton refinement of all trajectories, dysfunction curves and
//! shifts at once, with the noise variances held fixed.
//!
//! Plain block updates crawl along valleys where a trajectory and its
//! dysfunction curve trade off against each other; a joint step follows them.

use nalgebra::{DMatrix, DVector};

use super::{objective_indexed, valid_params, FitIndex, Parametrization, Prior, SigmoidPriors, NOISE_FLOOR};
use crate::model::{CohortDataset, FittedModel, ModelConfig};
use crate::sigmoid::SigmoidParams;

const MAX_ITER: usize = 50;
const MAX_DAMPING_TRIES: usize = 12;
/// Relative objective decrease below which refinement stops.
const REL_TOL: f64 = 1e-13;

/// Where each parameter block lives in the packed vector.
pub(super) struct Layout {
    lambda_param: Parametrization,
    lambda_width: usize,
    blocks: Vec<(usize, usize)>,
    /// `lambda_slot[d][l]`: index into `blocks`
    lambda_slot: Vec<Vec<Option<usize>>>,
    subjects: Vec<usize>,
    beta_slot: Vec<Option<usize>>,
    k_count: usize,
}

impl Layout {
    pub(super) fn new(config: &ModelConfig, blocks: &[(usize, usize)], subjects: &[usize], n_subjects: usize) -> Self {
        let (lambda_param, lambda_width) = if config.fixed_lambda_shape {
            (Parametrization::UnitShape, 2)
        } else {
            (Parametrization::Full, 4)
        };
        let mut lambda_slot = vec![vec![None; config.units]; config.diseases.len()];
        for (slot, &(d, l)) in blocks.iter().enumerate() {
            lambda_slot[d][l] = Some(slot);
        }
        let mut beta_slot = vec![None; n_subjects];
        for (slot, &i) in subjects.iter().enumerate() {
            beta_slot[i] = Some(slot);
        }
        Layout {
            lambda_param,
            lambda_width,
            blocks: blocks.to_vec(),
            lambda_slot,
            subjects: subjects.to_vec(),
            beta_slot,
            k_count: config.biomarkers.len(),
        }
    }

    fn theta_at(&self, k: usize) -> usize {
        4 * k
    }

    fn lambda_at(&self, slot: usize) -> usize {
        4 * self.k_count + self.lambda_width * slot
    }

    fn beta_at(&self, slot: usize) -> usize {
        4 * self.k_count + self.lambda_width * self.blocks.len() + slot
    }

    fn len(&self) -> usize {
        self.beta_at(self.subjects.len())
    }

    fn pack(&self, state: &FittedModel) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        for t in &state.theta {
            x.extend(Parametrization::Full.encode(t));
        }
        for &(d, l) in &self.blocks {
            x.extend(self.lambda_param.encode(&state.lambda[d][l]));
        }
        x.extend(self.subjects.iter().map(|&i| state.beta[i]));
        x
    }

    fn unpack(&self, x: &[f64], template: &FittedModel) -> FittedModel {
        let mut state = template.clone();
        for k in 0..self.k_count {
            let at = self.theta_at(k);
            state.theta[k] = Parametrization::Full.decode(&x[at..at + 4]);
        }
        for (slot, &(d, l)) in self.blocks.iter().enumerate() {
            let at = self.lambda_at(slot);
            state.lambda[d][l] = self.lambda_param.decode(&x[at..at + self.lambda_width]);
        }
        for (slot, &i) in self.subjects.iter().enumerate() {
            state.beta[i] = x[self.beta_at(slot)];
        }
        state
    }
}

/// Logistic value and its derivative factor `g (1 - g)`, with the same
/// clamping as curve evaluation.
fn logistic(p: &SigmoidParams, s: f64) -> (f64, f64) {
    let z = (-p.slope * (s - p.center)).clamp(-700.0, 700.0);
    let g = 1.0 / (1.0 + z.exp());
    (g, g * (1.0 - g))
}

/// Derivatives of the curve value with respect to its encoded parameters
/// and its input.
pub(crate) fn curve_grad(p: &SigmoidParams, s: f64, unit_shape: bool) -> (f64, [f64; 4], f64) {
    let (g, gg) = logistic(p, s);
    let value = p.amplitude * g + p.offset;
    let ds = p.amplitude * p.slope * gg;
    let d_ln_b = p.amplitude * gg * p.slope * (s - p.center);
    let d_c = -ds;
    let grad = if unit_shape {
        [d_ln_b, d_c, 0.0, 0.0]
    } else {
        [p.amplitude * g, d_ln_b, d_c, 1.0]
    };
    (value, grad, ds)
}

/// Accumulates `J^T J` and `J^T r` for the residual `r` with sparse row `row`.
pub(crate) fn accumulate(jtj: &mut DMatrix<f64>, jtr: &mut DVector<f64>, row: &[(usize, f64)], r: f64) {
    for &(a, va) in row {
        jtr[a] += va * r;
        for &(b, vb) in row {
            jtj[(a, b)] += va * vb;
        }
    }
}

pub(crate) fn prior_rows(
    prior: &Prior,
    at: usize,
    value: f64,
    log_scale: bool,
    jtj: &mut DMatrix<f64>,
    jtr: &mut DVector<f64>,
) {
    if let Prior::Gaussian { mean, std } = *prior {
        let r = (value - mean) / std;
        let j = if log_scale { value / std } else { 1.0 / std };
        accumulate(jtj, jtr, &[(at, j)], r);
    }
}

pub(crate) fn sigmoid_prior_rows(
    priors: &SigmoidPriors,
    p: &SigmoidParams,
    at: usize,
    unit_shape: bool,
    jtj: &mut DMatrix<f64>,
    jtr: &mut DVector<f64>,
) {
    if unit_shape {
        prior_rows(&priors.slope, at, p.slope, true, jtj, jtr);
        prior_rows(&priors.center, at + 1, p.center, false, jtj, jtr);
    } else {
        prior_rows(&priors.amplitude, at, p.amplitude, true, jtj, jtr);
        prior_rows(&priors.slope, at + 1, p.slope, true, jtj, jtr);
        prior_rows(&priors.center, at + 2, p.center, false, jtj, jtr);
        prior_rows(&priors.offset, at + 3, p.offset, false, jtj, jtr);
    }
}

/// Gauss-Newton normal equations of the objective at `state`, in the
/// packed coordinates of `layout`.
pub(super) fn normal_equations(
    layout: &Layout,
    index: &FitIndex,
    data: &CohortDataset,
    state: &FittedModel,
    config: &ModelConfig,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = layout.len();
    let mut jtj = DMatrix::zeros(n, n);
    let mut jtr = DVector::zeros(n);
    let unit_shape = matches!(layout.lambda_param, Parametrization::UnitShape);
    let scale: Vec<f64> = state.epsilon.iter().map(|e| 1.0 / e.max(NOISE_FLOOR).sqrt()).collect();
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(9);
    for o in &index.obs {
        let (Some(beta_slot), d) = (layout.beta_slot[o.subject], data.subjects[o.subject].disease) else {
            continue;
        };
        let l = config.unit_of(o.biomarker);
        let Some(lambda_slot) = layout.lambda_slot[d][l] else {
            continue;
        };
        let s = state.beta[o.subject] + o.years;
        let lam = &state.lambda[d][l];
        let (gamma, lam_grad, dgamma_ds) = curve_grad(lam, s, unit_shape);
        let (pred, theta_grad, dpred_dgamma) = curve_grad(&state.theta[o.biomarker], gamma, false);
        let w = scale[o.biomarker];
        // residual (y - pred) / sqrt(eps); its jacobian is -w dpred
        let r = w * (o.value - pred);
        row.clear();
        let t_at = layout.theta_at(o.biomarker);
        row.extend((0..4).map(|c| (t_at + c, -w * theta_grad[c])));
        let l_at = layout.lambda_at(lambda_slot);
        row.extend((0..layout.lambda_width).map(|c| (l_at + c, -w * dpred_dgamma * lam_grad[c])));
        row.push((layout.beta_at(beta_slot), -w * dpred_dgamma * dgamma_ds));
        accumulate(&mut jtj, &mut jtr, &row, r);
    }
    let p = &config.priors;
    for (k, t) in state.theta.iter().enumerate() {
        sigmoid_prior_rows(&p.theta, t, layout.theta_at(k), false, &mut jtj, &mut jtr);
    }
    for (slot, &(d, l)) in layout.blocks.iter().enumerate() {
        sigmoid_prior_rows(&p.lambda, &state.lambda[d][l], layout.lambda_at(slot), unit_shape, &mut jtj, &mut jtr);
    }
    for (slot, &i) in layout.subjects.iter().enumerate() {
        prior_rows(&p.beta, layout.beta_at(slot), state.beta[i], false, &mut jtj, &mut jtr);
    }
    (jtj, jtr)
}

fn lm_step(jtj: &DMatrix<f64>, jtr: &DVector<f64>, mu: f64) -> Option<DVector<f64>> {
    let mut a = jtj.clone();
    for i in 0..a.nrows() {
        let d = jtj[(i, i)];
        a[(i, i)] = d + mu * d.max(1e-12);
    }
    let chol = a.cholesky()?;
    let step = chol.solve(&(-jtr));
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Levenberg-Marquardt on a sum of squares whose Gauss-Newton system at
/// `x` is given by `normal`. `objective` must return infinity for invalid
/// points. Returns the final point only if it is strictly better than `x0`.
pub(crate) fn damped_gauss_newton<N, F>(x0: Vec<f64>, normal: N, objective: F) -> Option<(Vec<f64>, f64)>
where
    N: Fn(&[f64]) -> (DMatrix<f64>, DVector<f64>),
    F: Fn(&[f64]) -> f64,
{
    let start = objective(&x0);
    if !start.is_finite() {
        return None;
    }
    let mut x = x0;
    let mut f = start;
    let mut mu = 1e-3;
    for _ in 0..MAX_ITER {
        let (jtj, jtr) = normal(&x);
        let mut accepted = false;
        for _ in 0..MAX_DAMPING_TRIES {
            let Some(step) = lm_step(&jtj, &jtr, mu) else {
                mu *= 10.0;
                continue;
            };
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            let ft = objective(&trial);
            if ft < f {
                let gain = f - ft;
                x = trial;
                f = ft;
                mu = (mu / 3.0).max(1e-12);
                accepted = gain > REL_TOL * f.abs().max(1.0);
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    (f < start).then_some((x, f))
}

/// Returns a strictly better state, if the joint iteration finds one.
pub(super) fn refine(
    layout: &Layout,
    index: &FitIndex,
    data: &CohortDataset,
    state: &FittedModel,
    config: &ModelConfig,
) -> Option<FittedModel> {
    let normal = |x: &[f64]| normal_equations(layout, index, data, &layout.unpack(x, state), config);
    let objective = |x: &[f64]| {
        let trial = layout.unpack(x, state);
        let valid = trial.theta.iter().all(valid_params)
            && layout.blocks.iter().all(|&(d, l)| valid_params(&trial.lambda[d][l]))
            && trial.beta.iter().all(|b| b.is_finite());
        if valid {
            objective_indexed(index, data, &trial, config)
        } else {
            f64::INFINITY
        }
    };
    damped_gauss_newton(layout.pack(state), normal, objective).map(|(x, _)| layout.unpack(&x, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::{initialize, OptimizerSpec};
    use crate::synth::{default_spec, generate};

    fn small() -> (CohortDataset, ModelConfig, FittedModel) {
        let mut spec = default_spec();
        spec.diseases[0].subjects = 12;
        spec.diseases[1].subjects = 6;
        let (data, _) = generate(&spec).unwrap();
        let mut config = spec.model_config().unwrap();
        config.optimizer = OptimizerSpec {
            restarts: 1,
            ..OptimizerSpec::default()
        };
        let state = initialize(&data, &config).unwrap();
        (data, config, state)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // at the generating parameters, where curvature is moderate
        let mut spec = default_spec();
        spec.diseases[0].subjects = 12;
        spec.diseases[1].subjects = 6;
        let (data, truth) = generate(&spec).unwrap();
        let config = spec.model_config().unwrap();
        let mut state = spec.true_model(&truth);
        state.beta.iter_mut().for_each(|b| *b += 0.3);
        let index = FitIndex::new(&data, &config);
        let subjects: Vec<usize> = (0..data.subjects.len()).collect();
        let blocks: Vec<(usize, usize)> = (0..2).flat_map(|d| (0..2).map(move |l| (d, l))).collect();
        let layout = Layout::new(&config, &blocks, &subjects, data.subjects.len());
        let (_, jtr) = normal_equations(&layout, &index, &data, &state, &config);
        let x = layout.pack(&state);
        let f = |x: &[f64]| objective_indexed(&index, &data, &layout.unpack(x, &state), &config);
        for i in (0..x.len()).step_by(3) {
            let h = 1e-6 * x[i].abs().max(1.0);
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (f(&up) - f(&down)) / (2.0 * h);
            assert!((fd - jtr[i]).abs() < 1e-5 * fd.abs().max(1.0), "coordinate {i}: {fd} vs {}", jtr[i]);
        }
    }

    #[test]
    fn refinement_only_improves() {
        let (data, config, state) = small();
        let index = FitIndex::new(&data, &config);
        let subjects: Vec<usize> = (0..data.subjects.len()).collect();
        let blocks: Vec<(usize, usize)> = (0..2).flat_map(|d| (0..2).map(move |l| (d, l))).collect();
        let layout = Layout::new(&config, &blocks, &subjects, data.subjects.len());
        let before = objective_indexed(&index, &data, &state, &config);
        let refined = refine(&layout, &index, &data, &state, &config).expect("initial state is improvable");
        assert!(objective_indexed(&index, &data, &refined, &config) < before);
        assert_eq!(refined.epsilon, state.epsilon);
    }
}
