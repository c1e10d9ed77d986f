//! Cross-disease prediction benchmark: every model predicts each biomarker
//! of the target-disease test subjects from the other biomarkers that the
//! target disease has in training, and is scored by rank correlation.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{latent_stage_fit, linear_fit, spline_fit, GaussianProcess, GpOptions, LatentConfig};
use crate::error::{DktError, Result};
use crate::fit::{fit, mix, stage_subject, Observation};
use crate::model::{CohortDataset, ModelConfig};
use crate::stats::{bootstrap_corr, compare_models, spearman, EvalCell, EvalReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Dkt,
    Latent,
    Gp,
    Spline,
    Linear,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [ModelKind::Dkt, ModelKind::Latent, ModelKind::Gp, ModelKind::Spline, ModelKind::Linear];

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Dkt => "DKT",
            ModelKind::Latent => "Latent stage",
            ModelKind::Gp => "Multivariate GP",
            ModelKind::Spline => "Spline",
            ModelKind::Linear => "Linear",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = DktError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dkt" => Ok(ModelKind::Dkt),
            "latent" => Ok(ModelKind::Latent),
            "gp" => Ok(ModelKind::Gp),
            "spline" => Ok(ModelKind::Spline),
            "linear" => Ok(ModelKind::Linear),
            other => Err(DktError::InvalidConfig(format!(
                "unknown model `{other}` (expected dkt, latent, gp, spline or linear)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferOptions {
    /// Disease whose subjects are predicted.
    pub target: String,
    pub models: Vec<ModelKind>,
    /// Significance is tested against this model when it is present.
    #[serde(default = "default_reference")]
    pub reference: ModelKind,
    #[serde(default = "default_resamples")]
    pub resamples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_knots")]
    pub spline_knots: usize,
    #[serde(default)]
    pub gp: GpOptions,
}

fn default_reference() -> ModelKind {
    ModelKind::Dkt
}

fn default_resamples() -> usize {
    100
}

fn default_knots() -> usize {
    crate::baselines::regress::DEFAULT_KNOTS
}

impl TransferOptions {
    pub fn new(target: impl Into<String>, models: Vec<ModelKind>) -> Self {
        TransferOptions {
            target: target.into(),
            models,
            reference: default_reference(),
            resamples: default_resamples(),
            seed: 0,
            spline_knots: default_knots(),
            gp: GpOptions::default(),
        }
    }
}

/// What predicts one biomarker column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnPlan {
    pub target: usize,
    /// Inputs available to multivariate models and to staging.
    pub inputs: Vec<usize>,
    /// Input of the one-variable regressions: the first input in the same
    /// unit as the target, else the first input.
    pub single: usize,
}

/// For every biomarker, the biomarkers the target disease has in training
/// other than itself.
pub fn plan_columns(train: &CohortDataset, config: &ModelConfig, target: usize) -> Result<Vec<ColumnPlan>> {
    let mut seen = vec![false; config.biomarkers.len()];
    for m in &train.measurements {
        if train.subjects[m.subject].disease == target {
            seen[m.biomarker] = true;
        }
    }
    (0..config.biomarkers.len())
        .map(|k| {
            let inputs: Vec<usize> = (0..seen.len()).filter(|&j| j != k && seen[j]).collect();
            let Some(&first) = inputs.first() else {
                return Err(DktError::Precondition(format!(
                    "no input biomarkers left to predict `{}` for `{}`",
                    config.biomarkers[k], config.diseases[target]
                )));
            };
            let single = inputs
                .iter()
                .copied()
                .find(|&j| config.unit_of(j) == config.unit_of(k))
                .unwrap_or(first);
            Ok(ColumnPlan { target: k, inputs, single })
        })
        .collect()
}

/// One test visit scored in a column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub subject: usize,
    pub visit: usize,
    pub measured: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnPredictions {
    pub plan: ColumnPlan,
    pub cells: Vec<Cell>,
    /// `predicted[model][cell]`, models in the order requested.
    pub predicted: Vec<Vec<f64>>,
}

type Lookup = HashMap<(usize, usize, usize), f64>;

fn lookup(data: &CohortDataset) -> Lookup {
    data.measurements
        .iter()
        .map(|m| ((m.subject, m.visit, m.biomarker), m.value))
        .collect()
}

fn columns_cells(test: &CohortDataset, values: &Lookup, plan: &ColumnPlan, target: usize) -> Vec<Cell> {
    let mut cells = Vec::new();
    for (i, s) in test.subjects.iter().enumerate() {
        if s.disease != target {
            continue;
        }
        for j in 0..s.visits.len() {
            let Some(&measured) = values.get(&(i, j, plan.target)) else {
                continue;
            };
            if plan.inputs.iter().all(|&k| values.contains_key(&(i, j, k))) {
                cells.push(Cell { subject: i, visit: j, measured });
            }
        }
    }
    cells
}

/// Rows of `data` outside the target disease with the target and all `inputs`.
fn source_pairs(data: &CohortDataset, values: &Lookup, inputs: &[usize], k: usize, target: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, s) in data.subjects.iter().enumerate() {
        if s.disease == target {
            continue;
        }
        for j in 0..s.visits.len() {
            let Some(&v) = values.get(&(i, j, k)) else { continue };
            let row: Option<Vec<f64>> = inputs.iter().map(|&a| values.get(&(i, j, a)).copied()).collect();
            if let Some(row) = row {
                x.push(row);
                y.push(v);
            }
        }
    }
    (x, y)
}

fn observations(test: &CohortDataset, values: &Lookup, subject: usize, inputs: &[usize]) -> Vec<Observation> {
    let s = &test.subjects[subject];
    let mut obs = Vec::new();
    for (j, &months) in s.visits.iter().enumerate() {
        for &k in inputs {
            if let Some(&value) = values.get(&(subject, j, k)) {
                obs.push(Observation { months, biomarker: k, value });
            }
        }
    }
    obs
}

/// Trains the requested models on `train` and predicts every column for the
/// target-disease subjects of `test`.
pub fn transfer_predictions(
    train: &CohortDataset,
    test: &CohortDataset,
    config: &ModelConfig,
    options: &TransferOptions,
) -> Result<Vec<ColumnPredictions>> {
    if options.models.is_empty() {
        return Err(DktError::InvalidConfig("no models requested".into()));
    }
    let train = train.align_to(config)?;
    let test = test.align_to(config)?;
    let target = config.disease_index(&options.target)?;
    let plans = plan_columns(&train, config, target)?;
    let train_values = lookup(&train);
    let test_values = lookup(&test);

    let dkt = if options.models.contains(&ModelKind::Dkt) {
        Some(fit(&train, config)?.0)
    } else {
        None
    };
    let latent_config = LatentConfig::from_model(config);
    let latent = if options.models.contains(&ModelKind::Latent) {
        Some(latent_stage_fit(&train, &latent_config)?)
    } else {
        None
    };

    plans
        .into_iter()
        .map(|plan| {
            let cells = columns_cells(&test, &test_values, &plan, target);
            if cells.len() < 5 {
                return Err(DktError::Precondition(format!(
                    "only {} target-disease test cells for `{}`",
                    cells.len(),
                    config.biomarkers[plan.target]
                )));
            }
            let months = |c: &Cell| test.subjects[c.subject].visits[c.visit];
            let mut subjects: Vec<usize> = cells.iter().map(|c| c.subject).collect();
            subjects.dedup();
            let mut predicted = Vec::with_capacity(options.models.len());
            for &kind in &options.models {
                let column: Vec<f64> = match kind {
                    ModelKind::Dkt | ModelKind::Latent => {
                        let shifts: HashMap<usize, f64> = subjects
                            .par_iter()
                            .map(|&i| {
                                let obs = observations(&test, &test_values, i, &plan.inputs);
                                let b = match kind {
                                    ModelKind::Dkt => stage_subject(dkt.as_ref().expect("fitted"), config, target, &obs)?,
                                    _ => latent.as_ref().expect("fitted").stage(&latent_config, &obs)?,
                                };
                                Ok((i, b))
                            })
                            .collect::<Result<_>>()?;
                        cells
                            .iter()
                            .map(|c| {
                                let b = shifts[&c.subject];
                                match kind {
                                    ModelKind::Dkt => dkt.as_ref().expect("fitted").predict(config, target, b, months(c), plan.target),
                                    _ => latent.as_ref().expect("fitted").predict(b, months(c), plan.target),
                                }
                            })
                            .collect()
                    }
                    ModelKind::Gp => {
                        let (x, y) = source_pairs(&train, &train_values, &plan.inputs, plan.target, target);
                        let gp = GaussianProcess::fit(&x, &y, &GpOptions {
                            seed: mix(options.gp.seed ^ plan.target as u64),
                            ..options.gp
                        })?;
                        cells
                            .iter()
                            .map(|c| {
                                let q: Vec<f64> = plan.inputs.iter().map(|&a| test_values[&(c.subject, c.visit, a)]).collect();
                                gp.predict(&q).map(|p| p.0)
                            })
                            .collect::<Result<_>>()?
                    }
                    ModelKind::Spline | ModelKind::Linear => {
                        let (x, y) = source_pairs(&train, &train_values, &[plan.single], plan.target, target);
                        let x: Vec<f64> = x.into_iter().map(|r| r[0]).collect();
                        let r = if kind == ModelKind::Spline {
                            spline_fit(&x, &y, options.spline_knots)?
                        } else {
                            linear_fit(&x, &y)?
                        };
                        cells
                            .iter()
                            .map(|c| r.predict(test_values[&(c.subject, c.visit, plan.single)]))
                            .collect()
                    }
                };
                predicted.push(column);
            }
            Ok(ColumnPredictions { plan, cells, predicted })
        })
        .collect()
}

/// Rank-correlation table of the predictions, with bootstrap spreads and
/// Bonferroni-corrected tests against the reference model. Every model of a
/// column is resampled with the same seed, so the resamples are paired.
pub fn evaluate_columns(
    columns: &[ColumnPredictions],
    config: &ModelConfig,
    options: &TransferOptions,
) -> Result<EvalReport> {
    let n_models = options.models.len();
    let mut cells = vec![Vec::with_capacity(columns.len()); n_models];
    let reference = options.models.iter().position(|&m| m == options.reference);
    for col in columns {
        let measured: Vec<f64> = col.cells.iter().map(|c| c.measured).collect();
        let seed = mix(options.seed ^ col.plan.target as u64);
        let boots = col
            .predicted
            .iter()
            .map(|p| bootstrap_corr(p, &measured, options.resamples, seed))
            .collect::<Result<Vec<_>>>()?;
        for (m, (p, b)) in col.predicted.iter().zip(&boots).enumerate() {
            let comparison = match reference {
                Some(r) if r != m && n_models > 1 => Some(compare_models(&b.samples, &boots[r].samples, n_models - 1)?),
                _ => None,
            };
            cells[m].push(EvalCell {
                point: spearman(p, &measured)?,
                mean: b.mean,
                std: b.std,
                skipped: b.skipped,
                comparison,
            });
        }
    }
    let report = EvalReport {
        models: options.models.iter().map(|m| m.label().to_string()).collect(),
        regions: columns.iter().map(|c| config.biomarkers[c.plan.target].clone()).collect(),
        reference: options.reference.label().to_string(),
        resamples: options.resamples,
        seed: options.seed,
        cells,
        recovery: None,
    };
    report.validate()?;
    Ok(report)
}

pub fn compare(train: &CohortDataset, test: &CohortDataset, config: &ModelConfig, options: &TransferOptions) -> Result<EvalReport> {
    let columns = transfer_predictions(train, test, config, options)?;
    evaluate_columns(&columns, config, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_spec, generate};

    #[test]
    fn model_names_parse() {
        for m in ModelKind::ALL {
            let name = serde_json::to_string(&m).unwrap();
            assert_eq!(name.trim_matches('"').parse::<ModelKind>().unwrap(), m);
        }
        assert!("svm".parse::<ModelKind>().is_err());
    }

    #[test]
    fn columns_use_what_the_target_disease_has() {
        let spec = default_spec();
        let (data, _) = generate(&spec).unwrap();
        let config = spec.model_config().unwrap();
        let plans = plan_columns(&data, &config, 1).unwrap();
        assert_eq!(plans.len(), 6);
        for p in &plans {
            let expect: Vec<usize> = [2, 3].into_iter().filter(|&j| j != p.target).collect();
            assert_eq!(p.inputs, expect);
        }
        // same unit where possible
        assert_eq!(plans[0].single, 2);
        assert_eq!(plans[1].single, 3);
        assert_eq!(plans[2].single, 3);
    }

    #[test]
    fn regressors_only_see_source_rows() {
        let spec = default_spec();
        let (data, _) = generate(&spec).unwrap();
        let (x, y) = source_pairs(&data, &lookup(&data), &[2], 0, 1);
        assert_eq!(x.len(), 100 * 4);
        assert_eq!(y.len(), x.len());
    }
}
