//! Ground-truth synthetic cohorts drawn from the model itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DktError, Result};
use crate::model::{biomarker_predict, CohortDataset, FittedModel, Measurement, ModelConfig, Subject};
use crate::sigmoid::SigmoidParams;

pub const CONTROL: &str = "control";
pub const PATIENT: &str = "patient";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDisease {
    pub label: String,
    pub subjects: usize,
    /// Dysfunction trajectory per unit.
    pub lambda: Vec<SigmoidParams>,
    /// Biomarkers removed from this disease's observed data.
    #[serde(default)]
    pub withheld: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub biomarkers: Vec<String>,
    pub unit_allocation: Vec<usize>,
    pub theta: Vec<SigmoidParams>,
    pub diseases: Vec<SynthDisease>,
    /// Uniform range of time shifts, years.
    pub beta_range: [f64; 2],
    pub visits: usize,
    pub visit_spacing_months: f64,
    /// Gaussian noise standard deviation per biomarker.
    pub noise_std: Vec<f64>,
    /// Steepness of the stage-dependent diagnosis label model.
    pub diagnosis_scale: f64,
    pub seed: u64,
}

/// Every (subject, visit, biomarker) cell, withheld ones included.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub beta: Vec<f64>,
    /// Noise-free values.
    pub full: CohortDataset,
    /// Values with measurement noise, as they would have been observed;
    /// equal to the observed dataset on the cells it has.
    pub measured: CohortDataset,
}

pub fn default_spec() -> SynthSpec {
    let theta = |b, c| SigmoidParams {
        amplitude: 1.0,
        slope: b,
        center: c,
        offset: 0.0,
    };
    SynthSpec {
        biomarkers: (0..6).map(|k| format!("k{k}")).collect(),
        unit_allocation: vec![0, 1, 0, 1, 0, 1],
        theta: vec![
            theta(5.0, 0.2),
            theta(10.0, 0.2),
            theta(5.0, 0.55),
            theta(10.0, 0.55),
            theta(5.0, 0.9),
            theta(10.0, 0.9),
        ],
        diseases: vec![
            SynthDisease {
                label: "synthetic AD".into(),
                subjects: 100,
                lambda: vec![SigmoidParams::unit(0.3, -4.0), SigmoidParams::unit(0.2, 6.0)],
                withheld: vec![],
            },
            SynthDisease {
                label: "synthetic PCA".into(),
                subjects: 50,
                lambda: vec![SigmoidParams::unit(0.3, 6.0), SigmoidParams::unit(0.2, -4.0)],
                withheld: vec![0, 1, 4, 5],
            },
        ],
        beta_range: [-13.0, 10.0],
        visits: 4,
        visit_spacing_months: 12.0,
        noise_std: vec![0.05; 6],
        diagnosis_scale: 4.5,
        seed: 0,
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.biomarkers.len();
        let bad = |m: String| Err(DktError::InvalidConfig(m));
        if k == 0 || self.theta.len() != k || self.unit_allocation.len() != k || self.noise_std.len() != k {
            return bad("biomarkers, theta, unit_allocation and noise_std must have equal non-zero length".into());
        }
        let units = self.units();
        if self.diseases.is_empty() {
            return bad("at least one disease is required".into());
        }
        for d in &self.diseases {
            if d.subjects == 0 {
                return bad(format!("disease `{}` has no subjects", d.label));
            }
            if d.lambda.len() != units {
                return bad(format!("disease `{}` needs {units} dysfunction trajectories", d.label));
            }
            if d.withheld.iter().any(|&w| w >= k) {
                return bad(format!("disease `{}` withholds an unknown biomarker", d.label));
            }
            for l in &d.lambda {
                l.validate()?;
            }
        }
        for t in &self.theta {
            t.validate()?;
        }
        if self.visits == 0 || !(self.visit_spacing_months > 0.0) {
            return bad("visits must be positive with positive spacing".into());
        }
        if self.noise_std.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise std must be non-negative".into());
        }
        let [lo, hi] = self.beta_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return bad("beta_range must be an increasing finite interval".into());
        }
        Ok(())
    }

    pub fn units(&self) -> usize {
        self.unit_allocation.iter().max().map_or(0, |m| m + 1)
    }

    pub fn total_subjects(&self) -> usize {
        self.diseases.iter().map(|d| d.subjects).sum()
    }

    /// Default model configuration matching this cohort's layout.
    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::new(
            self.biomarkers.clone(),
            self.unit_allocation.clone(),
            self.diseases.iter().map(|d| d.label.clone()).collect(),
        )
    }

    /// The generating parameters as a model over the generated subjects.
    pub fn true_model(&self, truth: &GroundTruth) -> FittedModel {
        FittedModel {
            theta: self.theta.clone(),
            lambda: self.diseases.iter().map(|d| d.lambda.clone()).collect(),
            subject_ids: truth.full.subjects.iter().map(|s| s.id.clone()).collect(),
            beta: truth.beta.clone(),
            epsilon: self.noise_std.iter().map(|s| s * s).collect(),
            trace: Vec::new(),
        }
    }

    /// Stage normalized to [-1, 1] over the shift range.
    pub fn normalized_stage(&self, beta: f64) -> f64 {
        let [lo, hi] = self.beta_range;
        2.0 * (beta - lo) / (hi - lo) - 1.0
    }
}

/// Probability of a control label: `exp(-s z) / (exp(-s z) + exp(s z))`
/// with `z` the normalized stage, so early stages are mostly controls.
pub fn control_probability(beta: f64, spec: &SynthSpec) -> f64 {
    let z = spec.normalized_stage(beta);
    1.0 / (1.0 + (2.0 * spec.diagnosis_scale * z).exp())
}

pub fn assign_diagnosis<R: Rng + ?Sized>(beta: f64, spec: &SynthSpec, rng: &mut R) -> &'static str {
    if rng.random::<f64>() < control_probability(beta, spec) {
        CONTROL
    } else {
        PATIENT
    }
}

fn subject_rng(seed: u64, subject: u64) -> ChaCha8Rng {
    let mut z = seed ^ subject.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Draws one cohort. Each subject uses its own RNG stream derived from the
/// seed and its position, and always consumes the same number of draws.
pub fn generate(spec: &SynthSpec) -> Result<(CohortDataset, GroundTruth)> {
    spec.validate()?;
    let k_count = spec.biomarkers.len();
    let noise: Vec<Normal<f64>> = spec
        .noise_std
        .iter()
        .map(|&s| Normal::new(0.0, s).expect("validated std"))
        .collect();
    let visits: Vec<f64> = (0..spec.visits)
        .map(|j| j as f64 * spec.visit_spacing_months)
        .collect();

    let mut subjects = Vec::with_capacity(spec.total_subjects());
    let mut beta = Vec::with_capacity(spec.total_subjects());
    let mut observed = Vec::new();
    let mut full = Vec::new();
    let mut measured = Vec::new();
    for (d, disease) in spec.diseases.iter().enumerate() {
        for _ in 0..disease.subjects {
            let i = subjects.len();
            let mut rng = subject_rng(spec.seed, i as u64);
            let b = rng.random_range(spec.beta_range[0]..spec.beta_range[1]);
            let diagnosis = assign_diagnosis(b, spec, &mut rng);
            for (j, &months) in visits.iter().enumerate() {
                for k in 0..k_count {
                    let lambda = &disease.lambda[spec.unit_allocation[k]];
                    let clean = biomarker_predict(b, months, lambda, &spec.theta[k]);
                    let value = clean + noise[k].sample(&mut rng);
                    let cell = |value| Measurement {
                        subject: i,
                        visit: j,
                        biomarker: k,
                        value,
                    };
                    full.push(cell(clean));
                    measured.push(cell(value));
                    if !disease.withheld.contains(&k) {
                        observed.push(cell(value));
                    }
                }
            }
            subjects.push(Subject {
                id: format!("s{i:04}"),
                disease: d,
                diagnosis: diagnosis.to_string(),
                visits: visits.clone(),
            });
            beta.push(b);
        }
    }
    let diseases: Vec<String> = spec.diseases.iter().map(|d| d.label.clone()).collect();
    let dataset = CohortDataset::new(spec.biomarkers.clone(), diseases.clone(), subjects.clone(), observed)?;
    let full = CohortDataset::new(spec.biomarkers.clone(), diseases.clone(), subjects.clone(), full)?;
    let measured = CohortDataset::new(spec.biomarkers.clone(), diseases, subjects, measured)?;
    Ok((dataset, GroundTruth { beta, full, measured }))
}
