//! Cohort tables on disk, covariate residualization, min-max normalization
//! and model persistence.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{DktError, Result};
use crate::fit::FitDiagnostics;
use crate::model::{CohortDataset, FittedModel, Measurement, ModelConfig, Subject};

/// Leading columns of every cohort table, in order.
pub const FIXED_COLUMNS: [&str; 8] = [
    "subject_id",
    "disease",
    "diagnosis",
    "months_since_baseline",
    "age",
    "gender",
    "tiv",
    "source",
];
/// Optional trailing column of ground-truth tables.
pub const TRUE_BETA: &str = "true_beta";
pub const SCHEMA_VERSION: u32 = 1;
/// Diagnosis label of the rows covariate regressions are fitted on.
pub const CONTROL_LABEL: &str = "control";
/// Control rows required per biomarker before a covariate regression is fitted.
pub const MIN_CONTROL_ROWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariate {
    Age,
    Gender,
    Tiv,
    Source,
}

impl Covariate {
    fn slot(self) -> usize {
        match self {
            Covariate::Age => 0,
            Covariate::Gender => 1,
            Covariate::Tiv => 2,
            Covariate::Source => 3,
        }
    }

    fn name(self) -> &'static str {
        FIXED_COLUMNS[4 + self.slot()]
    }
}

/// One visit of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub subject_id: String,
    pub disease: String,
    pub diagnosis: String,
    pub months: f64,
    /// age, gender, tiv, source
    pub covariates: [Option<f64>; 4],
    pub values: Vec<Option<f64>>,
    pub true_beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub biomarkers: Vec<String>,
    pub rows: Vec<RawRow>,
    pub has_true_beta: bool,
}

fn parse_error(line: u64, column: &str, message: impl Into<String>) -> DktError {
    DktError::Parse {
        line,
        column: column.to_string(),
        message: message.into(),
    }
}

fn parse_number(cell: &str, line: u64, column: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    match cell.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        Ok(_) => Err(parse_error(line, column, format!("non-finite value `{cell}`"))),
        Err(_) => Err(parse_error(line, column, format!("malformed number `{cell}`"))),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RawTable {
    pub fn biomarker_index(&self, name: &str) -> Result<usize> {
        self.biomarkers
            .iter()
            .position(|b| b == name)
            .ok_or_else(|| DktError::UnknownBiomarker(name.to_string()))
    }

    /// Each (subject, months) pair appears once; a subject keeps one disease.
    pub fn validate(&self) -> Result<()> {
        let mut names = HashSet::new();
        for b in &self.biomarkers {
            if b.is_empty() || !names.insert(b.as_str()) || FIXED_COLUMNS.contains(&b.as_str()) || b == TRUE_BETA {
                return Err(DktError::Schema(format!("invalid or repeated biomarker column `{b}`")));
            }
        }
        let mut visits = HashSet::new();
        let mut disease_of: HashMap<&str, &str> = HashMap::new();
        for r in &self.rows {
            if r.values.len() != self.biomarkers.len() {
                return Err(DktError::Schema(format!(
                    "row for `{}` has {} values for {} biomarkers",
                    r.subject_id,
                    r.values.len(),
                    self.biomarkers.len()
                )));
            }
            if !visits.insert((r.subject_id.as_str(), r.months.to_bits())) {
                return Err(DktError::Schema(format!(
                    "duplicate visit for `{}` at month {}",
                    r.subject_id, r.months
                )));
            }
            if let Some(d) = disease_of.insert(&r.subject_id, &r.disease) {
                if d != r.disease {
                    return Err(DktError::Schema(format!(
                        "subject `{}` is labelled both `{d}` and `{}`",
                        r.subject_id, r.disease
                    )));
                }
            }
        }
        Ok(())
    }

    /// Groups rows into subjects in order of first appearance. Disease labels
    /// are indexed in order of first appearance too.
    pub fn to_dataset(&self) -> Result<CohortDataset> {
        self.validate()?;
        let mut diseases: Vec<String> = Vec::new();
        let mut subjects: Vec<Subject> = Vec::new();
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut measurements = Vec::new();
        for r in &self.rows {
            let d = match diseases.iter().position(|x| *x == r.disease) {
                Some(d) => d,
                None => {
                    diseases.push(r.disease.clone());
                    diseases.len() - 1
                }
            };
            let i = *index.entry(&r.subject_id).or_insert_with(|| {
                subjects.push(Subject {
                    id: r.subject_id.clone(),
                    disease: d,
                    diagnosis: r.diagnosis.clone(),
                    visits: Vec::new(),
                });
                subjects.len() - 1
            });
            let visit = subjects[i].visits.len();
            subjects[i].visits.push(r.months);
            for (k, v) in r.values.iter().enumerate() {
                if let Some(value) = *v {
                    measurements.push(Measurement {
                        subject: i,
                        visit,
                        biomarker: k,
                        value,
                    });
                }
            }
        }
        CohortDataset::new(self.biomarkers.clone(), diseases, subjects, measurements)
    }

    /// One row per visit; covariates are left empty.
    pub fn from_dataset(data: &CohortDataset) -> RawTable {
        let mut cells: HashMap<(usize, usize), Vec<Option<f64>>> = HashMap::new();
        for m in &data.measurements {
            cells
                .entry((m.subject, m.visit))
                .or_insert_with(|| vec![None; data.biomarkers.len()])[m.biomarker] = Some(m.value);
        }
        let mut rows = Vec::new();
        for (i, s) in data.subjects.iter().enumerate() {
            for (j, &months) in s.visits.iter().enumerate() {
                rows.push(RawRow {
                    subject_id: s.id.clone(),
                    disease: data.diseases[s.disease].clone(),
                    diagnosis: s.diagnosis.clone(),
                    months,
                    covariates: [None; 4],
                    values: cells.remove(&(i, j)).unwrap_or_else(|| vec![None; data.biomarkers.len()]),
                    true_beta: None,
                });
            }
        }
        RawTable {
            biomarkers: data.biomarkers.clone(),
            rows,
            has_true_beta: false,
        }
    }

    /// Attaches one true shift per subject id.
    pub fn with_true_beta(mut self, beta: &HashMap<String, f64>) -> Result<RawTable> {
        for r in &mut self.rows {
            let b = beta
                .get(&r.subject_id)
                .ok_or_else(|| DktError::Schema(format!("no true shift for `{}`", r.subject_id)))?;
            r.true_beta = Some(*b);
        }
        self.has_true_beta = true;
        Ok(self)
    }

    /// True shift per subject, from the first row of each subject.
    pub fn true_betas(&self) -> Result<HashMap<String, f64>> {
        if !self.has_true_beta {
            return Err(DktError::Schema(format!("table has no `{TRUE_BETA}` column")));
        }
        let mut out = HashMap::new();
        for r in &self.rows {
            let b = r
                .true_beta
                .ok_or_else(|| DktError::Schema(format!("missing true shift for `{}`", r.subject_id)))?;
            out.entry(r.subject_id.clone()).or_insert(b);
        }
        Ok(out)
    }
}

pub fn read_csv<R: Read>(reader: R) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let csv_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        parse_error(line, "", e.to_string())
    };
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header.len() < FIXED_COLUMNS.len() || header[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
        return Err(DktError::Schema(format!(
            "header must start with `{}`, found `{}`",
            FIXED_COLUMNS.join(","),
            header.join(",")
        )));
    }
    let mut biomarkers: Vec<String> = header[FIXED_COLUMNS.len()..].to_vec();
    let has_true_beta = biomarkers.last().is_some_and(|b| b == TRUE_BETA);
    if has_true_beta {
        biomarkers.pop();
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let cell = |c: usize| record.get(c).unwrap_or("");
        let subject_id = cell(0).to_string();
        if subject_id.is_empty() {
            return Err(parse_error(line, "subject_id", "empty subject id"));
        }
        let disease = cell(1).to_string();
        if disease.is_empty() {
            return Err(parse_error(line, "disease", "empty disease label"));
        }
        let months = parse_number(cell(3), line, FIXED_COLUMNS[3])?
            .ok_or_else(|| parse_error(line, FIXED_COLUMNS[3], "missing visit time"))?;
        let mut covariates = [None; 4];
        for (slot, c) in covariates.iter_mut().enumerate() {
            *c = parse_number(cell(4 + slot), line, FIXED_COLUMNS[4 + slot])?;
        }
        let values = biomarkers
            .iter()
            .enumerate()
            .map(|(k, name)| parse_number(cell(FIXED_COLUMNS.len() + k), line, name))
            .collect::<Result<Vec<_>>>()?;
        let true_beta = if has_true_beta {
            parse_number(cell(header.len() - 1), line, TRUE_BETA)?
        } else {
            None
        };
        rows.push(RawRow {
            subject_id,
            disease,
            diagnosis: cell(2).to_string(),
            months,
            covariates,
            values,
            true_beta,
        });
    }
    let table = RawTable {
        biomarkers,
        rows,
        has_true_beta,
    };
    table.validate()?;
    Ok(table)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<RawTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DktError::io(path, e))?;
    read_csv(BufReader::new(file))
}

/// Numbers are written in shortest round-trip form, so reading back is exact.
pub fn write_csv<W: Write>(table: &RawTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| DktError::Schema(e.to_string());
    let mut header: Vec<&str> = FIXED_COLUMNS.to_vec();
    header.extend(table.biomarkers.iter().map(String::as_str));
    if table.has_true_beta {
        header.push(TRUE_BETA);
    }
    w.write_record(&header).map_err(err)?;
    for r in &table.rows {
        let mut rec = vec![
            r.subject_id.clone(),
            r.disease.clone(),
            r.diagnosis.clone(),
            r.months.to_string(),
        ];
        rec.extend(r.covariates.iter().map(|c| fmt_opt(*c)));
        rec.extend(r.values.iter().map(|v| fmt_opt(*v)));
        if table.has_true_beta {
            rec.push(fmt_opt(r.true_beta));
        }
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(|e| DktError::Schema(e.to_string()))?;
    Ok(())
}

pub fn save_csv(table: &RawTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DktError::io(path, e))?;
    write_csv(table, BufWriter::new(file))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<CohortDataset> {
    load_csv(path)?.to_dataset()
}

pub fn save_dataset(data: &CohortDataset, path: impl AsRef<Path>) -> Result<()> {
    save_csv(&RawTable::from_dataset(data), path)
}

/// Per-biomarker covariate regression fitted on control rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Residualization {
    pub covariates: Vec<Covariate>,
    pub biomarkers: Vec<String>,
    /// Per biomarker: intercept followed by one slope per covariate.
    pub coefficients: Vec<Vec<f64>>,
    /// Per biomarker: mean of the control values.
    pub control_mean: Vec<f64>,
}

fn covariate_row(r: &RawRow, covariates: &[Covariate]) -> Result<Vec<f64>> {
    covariates
        .iter()
        .map(|c| {
            r.covariates[c.slot()].ok_or_else(|| {
                DktError::Precondition(format!(
                    "covariate `{}` missing for `{}` at month {}",
                    c.name(),
                    r.subject_id,
                    r.months
                ))
            })
        })
        .collect()
}

/// Ordinary least squares of `y` on `[1, x]`, after standardizing each
/// covariate column. Returns raw-scale (intercept, slopes).
fn ols(x: &[Vec<f64>], y: &[f64], covariates: &[Covariate], biomarker: &str) -> Result<Vec<f64>> {
    let n = y.len();
    let p = covariates.len();
    let mut mean = vec![0.0; p];
    let mut sd = vec![0.0; p];
    for j in 0..p {
        mean[j] = x.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        sd[j] = (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt();
        if !(sd[j] > 0.0) {
            return Err(DktError::RankDeficient(format!(
                "covariate `{}` is constant on the control rows of `{biomarker}`",
                covariates[j].name()
            )));
        }
    }
    let design = DMatrix::from_fn(n, p + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            (x[i][j - 1] - mean[j - 1]) / sd[j - 1]
        }
    });
    let sv = design.singular_values();
    let smax = sv.max();
    if sv.iter().any(|&s| s <= 1e-10 * smax) {
        return Err(DktError::RankDeficient(format!(
            "collinear covariates on the control rows of `{biomarker}`"
        )));
    }
    // standardized columns keep the normal equations well conditioned
    let gram = design.transpose() * &design;
    let rhs = design.transpose() * DVector::from_column_slice(y);
    let coef = gram
        .cholesky()
        .ok_or_else(|| DktError::RankDeficient(format!("singular normal equations for `{biomarker}`")))?
        .solve(&rhs);
    let mut out = vec![coef[0]];
    for j in 0..p {
        let slope = coef[j + 1] / sd[j];
        out[0] -= slope * mean[j];
        out.push(slope);
    }
    Ok(out)
}

impl Residualization {
    /// Replaces each value by its residual plus the control mean.
    pub fn apply(&self, table: &RawTable) -> Result<RawTable> {
        if table.biomarkers != self.biomarkers {
            return Err(DktError::Schema(format!(
                "table biomarkers {:?} do not match the fitted {:?}",
                table.biomarkers, self.biomarkers
            )));
        }
        let mut out = table.clone();
        for r in &mut out.rows {
            if r.values.iter().all(Option::is_none) {
                continue;
            }
            let x = covariate_row(r, &self.covariates)?;
            for (k, v) in r.values.iter_mut().enumerate() {
                if let Some(v) = v {
                    let c = &self.coefficients[k];
                    let fitted = c[0] + c[1..].iter().zip(&x).map(|(b, xi)| b * xi).sum::<f64>();
                    *v = *v - fitted + self.control_mean[k];
                }
            }
        }
        Ok(out)
    }
}

/// Fits one covariate regression per biomarker on the control rows and
/// applies it to every row.
pub fn residualize(table: &RawTable, covariates: &[Covariate]) -> Result<(RawTable, Residualization)> {
    table.validate()?;
    let mut seen = HashSet::new();
    if covariates.iter().any(|c| !seen.insert(*c)) {
        return Err(DktError::InvalidConfig("repeated covariate".into()));
    }
    let mut coefficients = Vec::new();
    let mut control_mean = Vec::new();
    for (k, name) in table.biomarkers.iter().enumerate() {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for r in table.rows.iter().filter(|r| r.diagnosis == CONTROL_LABEL) {
            if let Some(v) = r.values[k] {
                x.push(covariate_row(r, covariates)?);
                y.push(v);
            }
        }
        if y.len() < MIN_CONTROL_ROWS {
            return Err(DktError::InsufficientData {
                biomarker: name.clone(),
                count: y.len(),
                required: MIN_CONTROL_ROWS,
            });
        }
        coefficients.push(ols(&x, &y, covariates, name)?);
        control_mean.push(y.iter().sum::<f64>() / y.len() as f64);
    }
    let params = Residualization {
        covariates: covariates.to_vec(),
        biomarkers: table.biomarkers.clone(),
        coefficients,
        control_mean,
    };
    Ok((params.apply(table)?, params))
}

/// Which way a biomarker moves as disease advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increasing,
    Decreasing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiomarkerScale {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub direction: Direction,
}

impl BiomarkerScale {
    /// Not clipped: values outside the training range map outside [0, 1].
    pub fn normalize(&self, v: f64) -> f64 {
        let u = (v - self.min) / (self.max - self.min);
        match self.direction {
            Direction::Increasing => u,
            Direction::Decreasing => 1.0 - u,
        }
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        let u = match self.direction {
            Direction::Increasing => u,
            Direction::Decreasing => 1.0 - u,
        };
        self.min + u * (self.max - self.min)
    }
}

/// Everything needed to map a raw table onto the scale a model was fitted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizationParams {
    pub residualization: Option<Residualization>,
    /// Empty when values are used unscaled.
    #[serde(default)]
    pub scales: Vec<BiomarkerScale>,
}

impl NormalizationParams {
    pub fn apply_table(&self, table: &RawTable) -> Result<RawTable> {
        let mut out = match &self.residualization {
            Some(r) => r.apply(table)?,
            None => table.clone(),
        };
        if self.scales.is_empty() {
            return Ok(out);
        }
        let names: Vec<&str> = self.scales.iter().map(|s| s.name.as_str()).collect();
        if out.biomarkers.iter().map(String::as_str).ne(names.iter().copied()) {
            return Err(DktError::Schema(format!(
                "table biomarkers {:?} do not match the fitted {:?}",
                out.biomarkers, names
            )));
        }
        for r in &mut out.rows {
            for (v, s) in r.values.iter_mut().zip(&self.scales) {
                if let Some(v) = v {
                    *v = s.normalize(*v);
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, table: &RawTable) -> Result<CohortDataset> {
        self.apply_table(table)?.to_dataset()
    }

    /// Maps a normalized value of biomarker `k` back to the residualized scale.
    pub fn denormalize(&self, k: usize, u: f64) -> f64 {
        self.scales.get(k).map_or(u, |s| s.denormalize(u))
    }
}

fn scales_for(table: &RawTable, decreasing: &[String]) -> Result<Vec<BiomarkerScale>> {
    for d in decreasing {
        table.biomarker_index(d)?;
    }
    table
        .biomarkers
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let vals = table.rows.iter().filter_map(|r| r.values[k]);
            let (min, max) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if !(max > min) {
                return Err(DktError::Degenerate(format!("biomarker `{name}` is constant or empty")));
            }
            let direction = if decreasing.contains(name) {
                Direction::Decreasing
            } else {
                Direction::Increasing
            };
            Ok(BiomarkerScale {
                name: name.clone(),
                min,
                max,
                direction,
            })
        })
        .collect()
}

/// Min-max scales every biomarker onto [0, 1] so that larger means more
/// abnormal; biomarkers listed in `decreasing` are flipped.
pub fn normalize(table: &RawTable, decreasing: &[String]) -> Result<(CohortDataset, NormalizationParams)> {
    let params = NormalizationParams {
        residualization: None,
        scales: scales_for(table, decreasing)?,
    };
    Ok((params.apply(table)?, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessSpec {
    /// Covariates regressed out before scaling; none skips the regression.
    #[serde(default)]
    pub covariates: Vec<Covariate>,
    /// Biomarkers that fall as disease advances.
    #[serde(default)]
    pub decreasing: Vec<String>,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            covariates: Vec::new(),
            decreasing: Vec::new(),
            normalize: true,
        }
    }
}

/// Residualization (if any covariates are named) followed by scaling.
pub fn preprocess(table: &RawTable, spec: &PreprocessSpec) -> Result<(CohortDataset, NormalizationParams)> {
    let (residualized, residualization) = if spec.covariates.is_empty() {
        (table.clone(), None)
    } else {
        let (t, r) = residualize(table, &spec.covariates)?;
        (t, Some(r))
    };
    let scales = if spec.normalize {
        scales_for(&residualized, &spec.decreasing)?
    } else {
        Vec::new()
    };
    let params = NormalizationParams {
        residualization,
        scales,
    };
    Ok((params.apply(table)?, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShiftEntry {
    subject_id: String,
    beta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDocument {
    schema_version: u32,
    config: ModelConfig,
    theta: Vec<crate::sigmoid::SigmoidParams>,
    lambda: Vec<Vec<crate::sigmoid::SigmoidParams>>,
    beta: Vec<ShiftEntry>,
    epsilon: Vec<f64>,
    normalization: Option<NormalizationParams>,
    diagnostics: Option<FitDiagnostics>,
}

/// A fitted model with everything needed to reuse it on new data.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub config: ModelConfig,
    /// The objective trace is stored with the diagnostics.
    pub model: FittedModel,
    pub normalization: Option<NormalizationParams>,
    pub diagnostics: Option<FitDiagnostics>,
}

impl SavedModel {
    fn check(&self) -> Result<()> {
        let c = &self.config;
        let m = &self.model;
        let shape_ok = m.theta.len() == c.biomarkers.len()
            && m.epsilon.len() == c.biomarkers.len()
            && m.lambda.len() == c.diseases.len()
            && m.lambda.iter().all(|r| r.len() == c.units)
            && m.beta.len() == m.subject_ids.len();
        if !shape_ok {
            return Err(DktError::CorruptFile("parameter shapes do not match the configuration".into()));
        }
        let finite = m.theta.iter().chain(m.lambda.iter().flatten()).all(|p| p.validate().is_ok())
            && m.beta.iter().chain(&m.epsilon).all(|v| v.is_finite());
        if !finite {
            return Err(DktError::CorruptFile("non-finite or invalid parameters".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        self.check()?;
        let doc = ModelDocument {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            theta: self.model.theta.clone(),
            lambda: self.model.lambda.clone(),
            beta: self
                .model
                .subject_ids
                .iter()
                .zip(&self.model.beta)
                .map(|(id, &beta)| ShiftEntry {
                    subject_id: id.clone(),
                    beta,
                })
                .collect(),
            epsilon: self.model.epsilon.clone(),
            normalization: self.normalization.clone(),
            diagnostics: self.diagnostics.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| DktError::CorruptFile(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<SavedModel> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| DktError::CorruptFile(e.to_string()))?;
        match value.get("schema_version") {
            Some(serde_json::Value::Number(n)) if n.as_u64() == Some(SCHEMA_VERSION as u64) => {}
            Some(v) => {
                return Err(DktError::Version {
                    found: v.to_string(),
                    expected: SCHEMA_VERSION,
                })
            }
            None => {
                return Err(DktError::Version {
                    found: "none".into(),
                    expected: SCHEMA_VERSION,
                })
            }
        }
        let doc: ModelDocument =
            serde_json::from_value(value).map_err(|e| DktError::CorruptFile(e.to_string()))?;
        doc.config
            .validate()
            .map_err(|e| DktError::CorruptFile(format!("invalid configuration: {e}")))?;
        let saved = SavedModel {
            model: FittedModel {
                theta: doc.theta,
                lambda: doc.lambda,
                subject_ids: doc.beta.iter().map(|b| b.subject_id.clone()).collect(),
                beta: doc.beta.iter().map(|b| b.beta).collect(),
                epsilon: doc.epsilon,
                trace: doc.diagnostics.as_ref().map(|d| d.trace.clone()).unwrap_or_default(),
            },
            config: doc.config,
            normalization: doc.normalization,
            diagnostics: doc.diagnostics,
        };
        saved.check()?;
        Ok(saved)
    }
}

pub fn save_model(saved: &SavedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, saved.to_json()?).map_err(|e| DktError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DktError::io(path, e))?;
    SavedModel::from_json(&text)
}

/// Reads a JSON configuration document; unknown keys are rejected by the
/// target type.
pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DktError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| DktError::InvalidConfig(format!("{}: {e}", path.display())))
}

pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| DktError::InvalidConfig(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| DktError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::fit;
    use crate::synth::{default_spec, generate};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const HEADER: &str = "subject_id,disease,diagnosis,months_since_baseline,age,gender,tiv,source";

    #[test]
    fn synthetic_cohort_round_trips() {
        let (data, _) = generate(&default_spec()).unwrap();
        let mut buf = Vec::new();
        write_csv(&RawTable::from_dataset(&data), &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap().to_dataset().unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn ground_truth_column() {
        let text = format!("{HEADER},k0,true_beta\na,AD,patient,0,,,,,0.5,-3.25\na,AD,patient,12,,,,,,-3.25\n");
        let t = read_csv(text.as_bytes()).unwrap();
        assert!(t.has_true_beta);
        assert_eq!(t.biomarkers, ["k0"]);
        assert_eq!(t.true_betas().unwrap()["a"], -3.25);
        let d = t.to_dataset().unwrap();
        assert_eq!((d.subjects[0].visits.len(), d.measurements.len()), (2, 1));
    }

    #[test]
    fn missing_column_is_schema_error() {
        let text = "subject_id,disease,diagnosis,age,gender,tiv,source,k0\na,AD,patient,70,0,1,0,0.5\n";
        assert!(matches!(read_csv(text.as_bytes()), Err(DktError::Schema(_))));
    }

    #[test]
    fn nan_cell_names_row_and_column() {
        let text = format!("{HEADER},k0,k1\na,AD,patient,0,,,,,0.5,0.1\na,AD,patient,12,,,,,NaN,0.2\n");
        match read_csv(text.as_bytes()) {
            Err(DktError::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "k0");
            }
            other => panic!("{other:?}"),
        }
        let text = format!("{HEADER},k0\na,AD,patient,zero,,,,,0.5\n");
        assert!(matches!(read_csv(text.as_bytes()), Err(DktError::Parse { line: 2, .. })));
    }

    #[test]
    fn duplicate_visit_rejected() {
        let text = format!("{HEADER},k0\na,AD,patient,0,,,,,0.5\na,AD,patient,0,,,,,0.6\n");
        assert!(matches!(read_csv(text.as_bytes()), Err(DktError::Schema(_))));
    }

    fn covariate_table(n: usize, seed: u64, coef: [f64; 3], noise: f64) -> RawTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..n)
            .map(|i| {
                let age = rng.random_range(55.0..90.0);
                let gender = (i % 2) as f64;
                let tiv = rng.random_range(1.2e6..1.8e6);
                let control = i % 3 != 0;
                let base = if control { 1.0 } else { 1.8 };
                let v = base + coef[0] * age + coef[1] * gender + coef[2] * tiv + noise * rng.random_range(-1.0..1.0);
                RawRow {
                    subject_id: format!("s{i}"),
                    disease: "AD".into(),
                    diagnosis: if control { CONTROL_LABEL.into() } else { "patient".into() },
                    months: 0.0,
                    covariates: [Some(age), Some(gender), Some(tiv), Some(0.0)],
                    values: vec![Some(v)],
                    true_beta: None,
                }
            })
            .collect();
        RawTable {
            biomarkers: vec!["vol".into()],
            rows,
            has_true_beta: false,
        }
    }

    const COVS: [Covariate; 3] = [Covariate::Age, Covariate::Gender, Covariate::Tiv];

    #[test]
    fn recovers_injected_coefficients() {
        let coef = [0.02, -0.3, 4e-7];
        let t = covariate_table(60, 1, coef, 0.0);
        let (out, params) = residualize(&t, &COVS).unwrap();
        let c = &params.coefficients[0];
        assert!((c[0] - 1.0).abs() < 1e-6);
        for (a, b) in c[1..].iter().zip(coef) {
            assert!((a - b).abs() < 1e-6 * b.abs().max(1e-6), "{c:?}");
        }
        // controls collapse onto their mean; patients keep their offset
        let mean = params.control_mean[0];
        for (r, o) in t.rows.iter().zip(&out.rows) {
            let expected = if r.diagnosis == CONTROL_LABEL { mean } else { mean + 0.8 };
            assert!((o.values[0].unwrap() - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn independent_covariates_leave_values_nearly_unchanged() {
        let t = covariate_table(3000, 2, [0.0; 3], 0.05);
        let (out, params) = residualize(&t, &COVS).unwrap();
        let shift = t.rows.iter().zip(&out.rows).map(|(a, b)| (a.values[0].unwrap() - b.values[0].unwrap()).abs());
        assert!(shift.fold(0.0, f64::max) < 0.02, "{params:?}");
    }

    #[test]
    fn exact_linear_dependence_gives_control_mean() {
        let mut t = covariate_table(30, 3, [0.0; 3], 0.0);
        for r in &mut t.rows {
            r.values[0] = Some(2.0 * r.covariates[0].unwrap());
        }
        let (out, params) = residualize(&t, &[Covariate::Age]).unwrap();
        for r in &out.rows {
            assert!((r.values[0].unwrap() - params.control_mean[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_covariate_is_rank_deficient() {
        let t = covariate_table(30, 4, [0.01, 0.0, 0.0], 0.0);
        assert!(matches!(residualize(&t, &[Covariate::Age, Covariate::Source]), Err(DktError::RankDeficient(_))));
    }

    #[test]
    fn too_few_controls() {
        let t = covariate_table(12, 5, [0.01, 0.0, 0.0], 0.0);
        assert!(matches!(residualize(&t, &[Covariate::Age]), Err(DktError::InsufficientData { count: 8, .. })));
    }

    fn three_values() -> RawTable {
        let text = format!("{HEADER},k0\na,AD,patient,0,,,,,2\nb,AD,patient,0,,,,,4\nc,AD,patient,0,,,,,6\n");
        read_csv(text.as_bytes()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let (d, p) = normalize(&three_values(), &[]).unwrap();
        let v: Vec<f64> = d.measurements.iter().map(|m| m.value).collect();
        assert_eq!(v, [0.0, 0.5, 1.0]);
        let (d, p2) = normalize(&three_values(), &["k0".into()]).unwrap();
        let v: Vec<f64> = d.measurements.iter().map(|m| m.value).collect();
        assert_eq!(v, [1.0, 0.5, 0.0]);
        for x in [2.0, 3.3, 6.0, 9.0] {
            assert!((p.denormalize(0, p.scales[0].normalize(x)) - x).abs() < 1e-12);
            assert!((p2.denormalize(0, p2.scales[0].normalize(x)) - x).abs() < 1e-12);
        }
        // out-of-range test values are not clipped
        assert_eq!(p.scales[0].normalize(8.0), 1.5);
    }

    #[test]
    fn constant_biomarker_rejected() {
        let text = format!("{HEADER},k0\na,AD,patient,0,,,,,2\nb,AD,patient,0,,,,,2\n");
        let t = read_csv(text.as_bytes()).unwrap();
        assert!(matches!(normalize(&t, &[]), Err(DktError::Degenerate(_))));
        assert!(matches!(normalize(&three_values(), &["k9".into()]), Err(DktError::UnknownBiomarker(_))));
    }

    fn small_fit() -> SavedModel {
        let mut spec = default_spec();
        spec.diseases[0].subjects = 10;
        spec.diseases[1].subjects = 5;
        let (data, _) = generate(&spec).unwrap();
        let mut config = spec.model_config().unwrap();
        config.optimizer.max_sweeps = 2;
        config.optimizer.restarts = 1;
        let (model, diagnostics) = fit(&data, &config).unwrap();
        SavedModel {
            config,
            model,
            normalization: Some(NormalizationParams {
                residualization: None,
                scales: vec![],
            }),
            diagnostics: Some(diagnostics),
        }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let saved = small_fit();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        save_model(&saved, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, saved);
        for d in 0..2 {
            for k in 0..6 {
                for g in 0..50 {
                    let m = g as f64 * 0.7;
                    let a = saved.model.predict(&saved.config, d, -2.0, m, k);
                    assert_eq!(a.to_bits(), back.model.predict(&back.config, d, -2.0, m, k).to_bits());
                }
            }
        }
    }

    #[test]
    fn version_and_corruption_errors() {
        let text = small_fit().to_json().unwrap();
        let bumped = text.replacen("\"schema_version\": 1", "\"schema_version\": 7", 1);
        assert!(matches!(SavedModel::from_json(&bumped), Err(DktError::Version { .. })));
        let truncated = &text[..text.len() / 2];
        assert!(matches!(SavedModel::from_json(truncated), Err(DktError::CorruptFile(_))));
    }

    proptest! {
        #[test]
        fn residualize_idempotent_and_orthogonal(seed in any::<u64>(), a in -0.1f64..0.1, g in -1.0f64..1.0) {
            let t = covariate_table(40, seed, [a, g, 1e-7], 0.1);
            let (once, params) = residualize(&t, &COVS).unwrap();
            let (twice, _) = residualize(&once, &COVS).unwrap();
            for (x, y) in once.rows.iter().zip(&twice.rows) {
                prop_assert!((x.values[0].unwrap() - y.values[0].unwrap()).abs() < 1e-9);
            }
            let controls: Vec<&RawRow> = once.rows.iter().filter(|r| r.diagnosis == CONTROL_LABEL).collect();
            let n = controls.len() as f64;
            let mean = params.control_mean[0];
            for c in COVS {
                // centered covariate against residual
                let cm = controls.iter().map(|r| r.covariates[c.slot()].unwrap()).sum::<f64>() / n;
                let dot: f64 = controls
                    .iter()
                    .map(|r| (r.covariates[c.slot()].unwrap() - cm) * (r.values[0].unwrap() - mean))
                    .sum();
                let scale = controls.iter().map(|r| (r.covariates[c.slot()].unwrap() - cm).abs()).fold(0.0, f64::max);
                prop_assert!(dot.abs() < 1e-8 * n * scale.max(1.0));
            }
        }

        #[test]
        fn normalize_endpoints_exact(vals in prop::collection::vec(-100.0f64..100.0, 2..30)) {
            let rows = vals.iter().enumerate().map(|(i, v)| RawRow {
                subject_id: format!("s{i}"),
                disease: "AD".into(),
                diagnosis: "patient".into(),
                months: 0.0,
                covariates: [None; 4],
                values: vec![Some(*v)],
                true_beta: None,
            }).collect();
            let t = RawTable { biomarkers: vec!["k".into()], rows, has_true_beta: false };
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assume!(hi > lo);
            let (_, p) = normalize(&t, &[]).unwrap();
            prop_assert_eq!(p.scales[0].normalize(lo), 0.0);
            prop_assert_eq!(p.scales[0].normalize(hi), 1.0);
            for v in &vals {
                prop_assert!((p.denormalize(0, p.scales[0].normalize(*v)) - v).abs() < 1e-12 * (1.0 + v.abs()));
            }
        }
    }
}
