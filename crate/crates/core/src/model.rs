//! The generative model: cohort data, configuration, fitted parameters and the
//! two-level trajectory composition with its Gaussian posterior objective.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{DktError, Result};
use crate::fit::{OptimizerSpec, PriorSpec};
use crate::sigmoid::{sigmoid_eval, SigmoidParams};

pub const MONTHS_PER_YEAR: f64 = 12.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Biomarker names, in the order used by every per-biomarker vector.
    pub biomarkers: Vec<String>,
    /// Agnostic unit of each biomarker.
    pub unit_allocation: Vec<usize>,
    /// Number of agnostic units.
    pub units: usize,
    /// Disease labels; a subject's disease index points into this list.
    pub diseases: Vec<String>,
    #[serde(default = "default_true")]
    pub fixed_lambda_shape: bool,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn new(
        biomarkers: Vec<String>,
        unit_allocation: Vec<usize>,
        diseases: Vec<String>,
    ) -> Result<Self> {
        let units = unit_allocation.iter().max().map_or(0, |m| m + 1);
        let cfg = ModelConfig {
            biomarkers,
            unit_allocation,
            units,
            diseases,
            fixed_lambda_shape: true,
            priors: PriorSpec::default(),
            optimizer: OptimizerSpec::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.biomarkers.is_empty() {
            return Err(DktError::InvalidConfig("no biomarkers configured".into()));
        }
        if self.unit_allocation.len() != self.biomarkers.len() {
            return Err(DktError::InvalidConfig(format!(
                "unit allocation covers {} biomarkers but {} are configured",
                self.unit_allocation.len(),
                self.biomarkers.len()
            )));
        }
        if let Some((k, &l)) = self
            .unit_allocation
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.units)
        {
            return Err(DktError::InvalidConfig(format!(
                "biomarker `{}` allocated to unit {l} but only {} units exist",
                self.biomarkers[k], self.units
            )));
        }
        if self.diseases.is_empty() {
            return Err(DktError::InvalidConfig("no diseases configured".into()));
        }
        let mut seen = HashSet::new();
        for name in &self.biomarkers {
            if !seen.insert(name) {
                return Err(DktError::InvalidConfig(format!("duplicate biomarker `{name}`")));
            }
        }
        self.priors.validate()?;
        self.optimizer.validate()
    }

    pub fn biomarker_index(&self, name: &str) -> Result<usize> {
        self.biomarkers
            .iter()
            .position(|b| b == name)
            .ok_or_else(|| DktError::UnknownBiomarker(name.to_string()))
    }

    pub fn disease_index(&self, label: &str) -> Result<usize> {
        self.diseases
            .iter()
            .position(|d| d == label)
            .ok_or_else(|| DktError::UnknownDisease(label.to_string()))
    }

    pub fn unit_of(&self, biomarker: usize) -> usize {
        self.unit_allocation[biomarker]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    pub disease: usize,
    pub diagnosis: String,
    /// Months since baseline for each visit.
    pub visits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub subject: usize,
    pub visit: usize,
    pub biomarker: usize,
    pub value: f64,
}

/// Sparse longitudinal measurement set. Missing cells are simply absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortDataset {
    pub biomarkers: Vec<String>,
    pub diseases: Vec<String>,
    pub subjects: Vec<Subject>,
    pub measurements: Vec<Measurement>,
}

impl CohortDataset {
    pub fn new(
        biomarkers: Vec<String>,
        diseases: Vec<String>,
        subjects: Vec<Subject>,
        measurements: Vec<Measurement>,
    ) -> Result<Self> {
        let ds = CohortDataset {
            biomarkers,
            diseases,
            subjects,
            measurements,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.subjects.len());
        for s in &self.subjects {
            if !ids.insert(s.id.as_str()) {
                return Err(DktError::Schema(format!("duplicate subject id `{}`", s.id)));
            }
            if s.disease >= self.diseases.len() {
                return Err(DktError::Schema(format!(
                    "subject `{}` has disease index {} outside the {} known diseases",
                    s.id,
                    s.disease,
                    self.diseases.len()
                )));
            }
            if s.visits.iter().any(|m| !m.is_finite()) {
                return Err(DktError::Schema(format!("subject `{}` has a non-finite visit time", s.id)));
            }
        }
        let mut keys = HashSet::with_capacity(self.measurements.len());
        for m in &self.measurements {
            let subject = self.subjects.get(m.subject).ok_or_else(|| {
                DktError::Schema(format!("measurement references unknown subject {}", m.subject))
            })?;
            if m.visit >= subject.visits.len() {
                return Err(DktError::Schema(format!(
                    "measurement references visit {} of subject `{}` which has {} visits",
                    m.visit,
                    subject.id,
                    subject.visits.len()
                )));
            }
            if m.biomarker >= self.biomarkers.len() {
                return Err(DktError::Schema(format!(
                    "measurement references unknown biomarker {}",
                    m.biomarker
                )));
            }
            if !m.value.is_finite() {
                return Err(DktError::Schema(format!(
                    "non-finite value for subject `{}`, biomarker `{}`",
                    subject.id, self.biomarkers[m.biomarker]
                )));
            }
            if !keys.insert((m.subject, m.visit, m.biomarker)) {
                return Err(DktError::Schema(format!(
                    "duplicate measurement for subject `{}`, visit {}, biomarker `{}`",
                    subject.id, m.visit, self.biomarkers[m.biomarker]
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.measurements.is_empty()
    }

    pub fn months(&self, m: &Measurement) -> f64 {
        self.subjects[m.subject].visits[m.visit]
    }

    pub fn counts_per_biomarker(&self) -> Vec<usize> {
        let mut counts = vec![0; self.biomarkers.len()];
        for m in &self.measurements {
            counts[m.biomarker] += 1;
        }
        counts
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.id == id)
    }

    /// Re-indexes biomarkers and diseases onto a model's ordering. Biomarker
    /// columns unknown to the model are rejected.
    pub fn align_to(&self, config: &ModelConfig) -> Result<CohortDataset> {
        let bio_map = self
            .biomarkers
            .iter()
            .map(|b| config.biomarker_index(b))
            .collect::<Result<Vec<_>>>()?;
        let dis_map = self
            .diseases
            .iter()
            .map(|d| config.disease_index(d))
            .collect::<Result<Vec<_>>>();
        // diseases only matter for subjects that are actually present
        let dis_map = match dis_map {
            Ok(m) => m,
            Err(e) => {
                let used: HashSet<usize> = self.subjects.iter().map(|s| s.disease).collect();
                let mut map = vec![usize::MAX; self.diseases.len()];
                for (i, label) in self.diseases.iter().enumerate() {
                    match config.disease_index(label) {
                        Ok(j) => map[i] = j,
                        Err(_) if !used.contains(&i) => {}
                        Err(_) => return Err(e),
                    }
                }
                map
            }
        };
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject {
                disease: dis_map[s.disease],
                ..s.clone()
            })
            .collect();
        let measurements = self
            .measurements
            .iter()
            .map(|m| Measurement {
                biomarker: bio_map[m.biomarker],
                ..*m
            })
            .collect();
        CohortDataset::new(
            config.biomarkers.clone(),
            config.diseases.clone(),
            subjects,
            measurements,
        )
    }

    /// Keeps only the listed subjects (in the given order) and re-indexes.
    pub fn select_subjects(&self, keep: &[usize]) -> CohortDataset {
        let mut remap = vec![usize::MAX; self.subjects.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let mut measurements: Vec<Measurement> = self
            .measurements
            .iter()
            .filter(|m| remap[m.subject] != usize::MAX)
            .map(|m| Measurement {
                subject: remap[m.subject],
                ..*m
            })
            .collect();
        measurements.sort_by_key(|m| (m.subject, m.visit, m.biomarker));
        CohortDataset {
            biomarkers: self.biomarkers.clone(),
            diseases: self.diseases.clone(),
            subjects: keep.iter().map(|&i| self.subjects[i].clone()).collect(),
            measurements,
        }
    }

    /// Drops every measurement of the given biomarkers.
    pub fn without_biomarkers(&self, drop: &[usize]) -> CohortDataset {
        CohortDataset {
            measurements: self
                .measurements
                .iter()
                .filter(|m| !drop.contains(&m.biomarker))
                .copied()
                .collect(),
            ..self.clone()
        }
    }
}

/// Estimated parameters. `beta` and `subject_ids` follow the training
/// dataset's subject order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub theta: Vec<SigmoidParams>,
    /// Indexed `[disease][unit]`.
    pub lambda: Vec<Vec<SigmoidParams>>,
    pub subject_ids: Vec<String>,
    /// Time shift per subject, in years.
    pub beta: Vec<f64>,
    pub epsilon: Vec<f64>,
    /// Objective value after initialization and after each sweep.
    pub trace: Vec<f64>,
}

impl FittedModel {
    pub fn predict(&self, config: &ModelConfig, disease: usize, beta: f64, months: f64, k: usize) -> f64 {
        biomarker_predict(beta, months, &self.lambda[disease][config.unit_of(k)], &self.theta[k])
    }

    pub fn beta_of(&self, subject_id: &str) -> Option<f64> {
        self.subject_ids
            .iter()
            .position(|s| s == subject_id)
            .map(|i| self.beta[i])
    }
}

/// Disease stage in years: the shift plus the visit time converted from months.
#[inline]
pub fn disease_stage(beta_years: f64, months: f64) -> f64 {
    beta_years + months / MONTHS_PER_YEAR
}

#[inline]
pub fn dysfunction_score(beta_years: f64, months: f64, lambda: &SigmoidParams) -> f64 {
    sigmoid_eval(disease_stage(beta_years, months), lambda)
}

#[inline]
pub fn biomarker_predict(
    beta_years: f64,
    months: f64,
    lambda: &SigmoidParams,
    theta: &SigmoidParams,
) -> f64 {
    sigmoid_eval(dysfunction_score(beta_years, months, lambda), theta)
}

/// Negative log posterior: Gaussian measurement terms minus log priors.
///
/// Every biomarker carrying measurements must have a strictly positive noise
/// variance; a zero variance makes the density degenerate.
pub fn neg_log_posterior(data: &CohortDataset, model: &FittedModel, config: &ModelConfig) -> Result<f64> {
    neg_log_posterior_floored(data, model, config, 0.0)
}

/// Same objective with each variance replaced by `max(epsilon_k, floor)`.
pub(crate) fn neg_log_posterior_floored(
    data: &CohortDataset,
    model: &FittedModel,
    config: &ModelConfig,
    floor: f64,
) -> Result<f64> {
    let k_count = config.biomarkers.len();
    let mut sse = vec![0.0; k_count];
    let mut counts = vec![0usize; k_count];
    for m in &data.measurements {
        let subject = &data.subjects[m.subject];
        let pred = model.predict(config, subject.disease, model.beta[m.subject], subject.visits[m.visit], m.biomarker);
        let r = m.value - pred;
        sse[m.biomarker] += r * r;
        counts[m.biomarker] += 1;
    }
    let mut total = 0.0;
    for k in 0..k_count {
        if counts[k] == 0 {
            continue;
        }
        let eps = model.epsilon[k].max(floor);
        if eps <= 0.0 {
            return Err(DktError::DegenerateNoise {
                biomarker: config.biomarkers[k].clone(),
            });
        }
        total += sse[k] / (2.0 * eps) + 0.5 * counts[k] as f64 * (2.0 * std::f64::consts::PI * eps).ln();
    }
    total += neg_log_prior(model, config);
    Ok(total)
}

pub(crate) fn neg_log_prior(model: &FittedModel, config: &ModelConfig) -> f64 {
    let p = &config.priors;
    let theta: f64 = model.theta.iter().map(|t| p.theta_penalty(t)).sum();
    let lambda: f64 = model
        .lambda
        .iter()
        .flatten()
        .map(|l| p.lambda_penalty(l))
        .sum();
    let beta: f64 = model.beta.iter().map(|&b| p.beta.penalty(b)).sum();
    theta + lambda + beta
}
