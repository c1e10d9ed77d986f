use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use dkt_core::io::{self, load_csv, load_json, load_model, save_csv, save_json, SavedModel, RawTable};
use dkt_core::stats::{bootstrap_corr, shift_r2, spearman, stage_grid, trajectory_mae, EvalCell, EvalReport, RecoveryReport};
use dkt_core::synth::{default_spec, generate, SynthSpec};
use dkt_core::transfer::{compare, ModelKind, TransferOptions};
use dkt_core::{
    fit_from, initialize, predict_missing, stage_dataset, CohortDataset, DktError, ModelConfig, Result,
};
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::config::RunConfig;

pub struct Globals {
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub verbose: u8,
}

impl Globals {
    /// Sizes the worker pool once; a later call is a no-op.
    fn threads(&self, from_config: Option<usize>) -> Result<()> {
        if let Some(n) = self.threads.or(from_config) {
            if n == 0 {
                return Err(DktError::InvalidConfig("thread count must be positive".into()));
            }
            // fails only if a pool already exists, which keeps the first size
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(())
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| DktError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| DktError::io(path, e))
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn csv_error(path: &Path, e: csv::Error) -> DktError {
    match e.into_kind() {
        csv::ErrorKind::Io(err) => DktError::io(path, err),
        other => DktError::Schema(format!("{}: {other:?}", path.display())),
    }
}

pub fn load_spec(name: &str) -> Result<SynthSpec> {
    let spec = if name == "default" {
        default_spec()
    } else {
        load_json::<SynthSpec>(name)?
    };
    spec.validate()?;
    Ok(spec)
}

fn load_run(path: &Path, g: &Globals) -> Result<RunConfig> {
    let mut run: RunConfig = load_json(path)?;
    if let Some(seed) = g.seed {
        run.optimizer.seed = seed;
    }
    g.threads(run.threads)?;
    Ok(run)
}

/// Applies the run's preprocessing, if any, and lays the data out for the model.
fn prepare(table: &RawTable, run: &RunConfig) -> Result<(CohortDataset, ModelConfig, Option<io::NormalizationParams>)> {
    let config = run.model_config(table)?;
    let (data, params) = match &run.preprocess {
        Some(spec) => {
            let (d, p) = io::preprocess(table, spec)?;
            (d, Some(p))
        }
        None => (table.to_dataset()?, None),
    };
    Ok((data.align_to(&config)?, config, params))
}

/// A raw table mapped onto a saved model's scale and layout.
fn model_data(saved: &SavedModel, table: &RawTable) -> Result<CohortDataset> {
    let data = match &saved.normalization {
        Some(p) => p.apply(table)?,
        None => table.to_dataset()?,
    };
    data.align_to(&saved.config)
}

fn biomarker_indices(config: &ModelConfig, names: &[String]) -> Result<Vec<usize>> {
    names.iter().map(|n| config.biomarker_index(n.trim())).collect()
}

pub fn generate_cmd(a: &GenerateArgs, g: &Globals) -> Result<()> {
    g.threads(None)?;
    let mut spec = load_spec(&a.spec)?;
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    let (data, truth) = generate(&spec)?;
    create_dir(&a.out)?;
    let betas: HashMap<String, f64> = truth
        .full
        .subjects
        .iter()
        .map(|s| s.id.clone())
        .zip(truth.beta.iter().copied())
        .collect();
    save_csv(&RawTable::from_dataset(&data), a.out.join("data.csv"))?;
    save_csv(
        &RawTable::from_dataset(&truth.full).with_true_beta(&betas)?,
        a.out.join("ground_truth.csv"),
    )?;
    save_csv(&RawTable::from_dataset(&truth.measured), a.out.join("measured.csv"))?;
    save_json(&RunConfig::for_spec(&spec), a.out.join("config.json"))?;
    let visits: usize = data.subjects.iter().map(|s| s.visits.len()).sum();
    println!(
        "generated {} subjects, {} visits, {} observed measurements ({} cells in total) in {}",
        data.subjects.len(),
        visits,
        data.measurements.len(),
        truth.full.measurements.len(),
        a.out.display()
    );
    Ok(())
}

pub fn preprocess_cmd(a: &PreprocessArgs, g: &Globals) -> Result<()> {
    let run = load_run(&a.config, g)?;
    let table = load_csv(&a.data)?;
    let spec = run.preprocess.clone().unwrap_or_default();
    let (data, params) = io::preprocess(&table, &spec)?;
    io::save_dataset(&data, &a.out)?;
    if let Some(p) = &a.params {
        save_json(&params, p)?;
    }
    println!("preprocessed {} subjects, {} measurements", data.subjects.len(), data.measurements.len());
    Ok(())
}

pub fn fit_cmd(a: &FitArgs, g: &Globals) -> Result<()> {
    let mut run = load_run(&a.config, g)?;
    if let Some(n) = a.max_sweeps {
        run.optimizer.max_sweeps = n;
    }
    let table = load_csv(&a.data)?;
    let (data, config, normalization) = prepare(&table, &run)?;
    let init = initialize(&data, &config)?;
    let (model, diagnostics) = fit_from(&data, &config, init, None)?;
    if g.verbose > 0 {
        for (i, f) in diagnostics.trace.iter().enumerate() {
            eprintln!("sweep {i:>3}  objective {f:.6}");
        }
    }
    let objective = *diagnostics.trace.last().expect("trace starts with the initial objective");
    println!(
        "objective {objective:.6}  sweeps {}  converged {}",
        diagnostics.sweeps, diagnostics.converged
    );
    io::save_model(
        &SavedModel {
            config,
            model,
            normalization,
            diagnostics: Some(diagnostics),
        },
        &a.out,
    )
}

#[derive(Debug, Serialize)]
struct ShiftRow<'a> {
    subject_id: &'a str,
    disease: &'a str,
    beta: f64,
}

pub fn stage_cmd(a: &StageArgs, g: &Globals) -> Result<()> {
    g.threads(None)?;
    let saved = load_model(&a.model)?;
    let data = model_data(&saved, &load_csv(&a.data)?)?;
    let using = a.using.as_deref().map(|u| biomarker_indices(&saved.config, u)).transpose()?;
    let shifts = stage_dataset(&saved.model, &saved.config, &data, using.as_deref())?;
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| csv_error(&a.out, e))?;
    let mut staged = 0;
    for (s, b) in data.subjects.iter().zip(&shifts) {
        if let Some(beta) = *b {
            w.serialize(ShiftRow {
                subject_id: &s.id,
                disease: &data.diseases[s.disease],
                beta,
            })
            .map_err(|e| csv_error(&a.out, e))?;
            staged += 1;
        }
    }
    w.flush().map_err(|e| DktError::io(&a.out, e))?;
    println!("staged {staged} of {} subjects", data.subjects.len());
    Ok(())
}

/// One predicted cell; `predicted` is on the scale of the input table and
/// `normalized` on the model's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub subject_id: String,
    pub disease: String,
    pub months_since_baseline: f64,
    pub biomarker: String,
    pub predicted: f64,
    pub normalized: f64,
}

pub fn predict_cmd(a: &PredictArgs, g: &Globals) -> Result<()> {
    g.threads(None)?;
    let saved = load_model(&a.model)?;
    let config = &saved.config;
    let targets = biomarker_indices(config, &a.biomarkers)?;
    let using = match &a.using {
        Some(u) => biomarker_indices(config, u)?,
        None => (0..config.biomarkers.len()).filter(|k| !targets.contains(k)).collect(),
    };
    let data = model_data(&saved, &load_csv(&a.data)?)?;
    let shifts = stage_dataset(&saved.model, config, &data, Some(&using))?;
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| csv_error(&a.out, e))?;
    let (mut rows, mut unstaged) = (0, 0);
    for (s, b) in data.subjects.iter().zip(&shifts) {
        let Some(beta) = *b else {
            unstaged += 1;
            continue;
        };
        for &months in &s.visits {
            for &k in &targets {
                let u = predict_missing(&saved.model, config, s.disease, beta, months, k)?;
                let predicted = saved.normalization.as_ref().map_or(u, |p| p.denormalize(k, u));
                w.serialize(PredictionRow {
                    subject_id: s.id.clone(),
                    disease: data.diseases[s.disease].clone(),
                    months_since_baseline: months,
                    biomarker: config.biomarkers[k].clone(),
                    predicted,
                    normalized: u,
                })
                .map_err(|e| csv_error(&a.out, e))?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(|e| DktError::io(&a.out, e))?;
    if unstaged > 0 {
        eprintln!("{unstaged} subjects had no measurements to stage from and were skipped");
    }
    println!("wrote {rows} predictions");
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| DktError::Parse {
                line: i as u64 + 2,
                column: String::new(),
                message: e.to_string(),
            })
        })
        .collect()
}

/// Keys of a visit: subject id and visit time to the bit.
type VisitKey = (String, u64);

pub fn evaluate_cmd(a: &EvaluateArgs, g: &Globals) -> Result<()> {
    g.threads(None)?;
    let preds = read_predictions(&a.pred)?;
    if preds.is_empty() {
        return Err(DktError::Schema(format!("{} holds no predictions", a.pred.display())));
    }
    let truth = load_csv(&a.truth)?;
    let rows: HashMap<VisitKey, usize> = truth
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| ((r.subject_id.clone(), r.months.to_bits()), i))
        .collect();
    let mut regions: Vec<String> = Vec::new();
    let mut pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for p in &preds {
        let k = truth.biomarker_index(&p.biomarker)?;
        let row = rows
            .get(&(p.subject_id.clone(), p.months_since_baseline.to_bits()))
            .ok_or_else(|| {
                DktError::Schema(format!(
                    "prediction for `{}` at month {} has no row in the truth table",
                    p.subject_id, p.months_since_baseline
                ))
            })?;
        let value = truth.rows[*row].values[k].ok_or_else(|| {
            DktError::Schema(format!(
                "truth table has no `{}` value for `{}` at month {}",
                p.biomarker, p.subject_id, p.months_since_baseline
            ))
        })?;
        let r = match regions.iter().position(|x| *x == p.biomarker) {
            Some(r) => r,
            None => {
                regions.push(p.biomarker.clone());
                pairs.push((Vec::new(), Vec::new()));
                regions.len() - 1
            }
        };
        pairs[r].0.push(p.predicted);
        pairs[r].1.push(value);
    }
    let seed = g.seed.unwrap_or(0);
    let cells = pairs
        .iter()
        .map(|(p, m)| {
            let b = bootstrap_corr(p, m, a.bootstrap, seed)?;
            Ok(EvalCell {
                point: spearman(p, m)?,
                mean: b.mean,
                std: b.std,
                skipped: b.skipped,
                comparison: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let recovery = match &a.model {
        Some(m) => Some(recovery(&load_model(m)?, &truth, a.spec.as_deref())?),
        None => None,
    };
    let report = EvalReport {
        models: vec![a.label.clone()],
        regions,
        reference: a.label.clone(),
        resamples: a.bootstrap,
        seed,
        cells: vec![cells],
        recovery,
    };
    report.validate()?;
    emit_report(&report, &a.out)
}

/// Shift R² per disease against the truth table's `true_beta` column, and
/// with a spec, the trajectory error per biomarker over the dysfunction axis.
fn recovery(saved: &SavedModel, truth: &RawTable, spec: Option<&str>) -> Result<RecoveryReport> {
    let betas = truth.true_betas()?;
    let mut disease_of: HashMap<&str, &str> = HashMap::new();
    for r in &truth.rows {
        disease_of.entry(&r.subject_id).or_insert(&r.disease);
    }
    let mut shift = Vec::new();
    for d in &saved.config.diseases {
        let (t, e): (Vec<f64>, Vec<f64>) = saved
            .model
            .subject_ids
            .iter()
            .zip(&saved.model.beta)
            .filter(|(id, _)| disease_of.get(id.as_str()) == Some(&d.as_str()))
            .filter_map(|(id, &b)| betas.get(id).map(|&t| (t, b)))
            .unzip();
        if t.len() >= 2 {
            shift.push((d.clone(), shift_r2(&t, &e)?));
        }
    }
    let mut mae = Vec::new();
    if let Some(name) = spec {
        let spec = load_spec(name)?;
        let grid = stage_grid(0.0, 1.0, dkt_core::stats::DEFAULT_GRID_POINTS);
        let mut total = 0.0;
        for (k, b) in saved.config.biomarkers.iter().enumerate() {
            let j = spec
                .biomarkers
                .iter()
                .position(|x| x == b)
                .ok_or_else(|| DktError::UnknownBiomarker(b.clone()))?;
            let e = trajectory_mae(&spec.theta[j..=j], &saved.model.theta[k..=k], &grid)?;
            total += e;
            mae.push((b.clone(), e));
        }
        mae.push(("all".into(), total / saved.config.biomarkers.len() as f64));
    }
    Ok(RecoveryReport {
        trajectory_mae: mae,
        shift_r2: shift,
    })
}

fn emit_report(report: &EvalReport, out: &Path) -> Result<()> {
    let text = report.to_text();
    print!("{text}");
    write_text(&with_suffix(out, "txt"), &text)?;
    write_text(&with_suffix(out, "csv"), &report.to_csv()?)
}

/// The disease with the fewest observed biomarkers.
fn default_target(data: &CohortDataset) -> Result<String> {
    let mut seen = vec![vec![false; data.biomarkers.len()]; data.diseases.len()];
    for m in &data.measurements {
        seen[data.subjects[m.subject].disease][m.biomarker] = true;
    }
    seen.iter()
        .enumerate()
        .filter(|(_, s)| s.iter().any(|&x| x))
        .min_by_key(|(d, s)| (s.iter().filter(|&&x| x).count(), *d))
        .map(|(d, _)| data.diseases[d].clone())
        .ok_or_else(|| DktError::Precondition("training data has no measurements".into()))
}

pub fn compare_cmd(a: &CompareArgs, g: &Globals) -> Result<()> {
    let run = load_run(&a.config, g)?;
    let models = a.models.iter().map(|m| m.parse()).collect::<Result<Vec<ModelKind>>>()?;
    if models.is_empty() {
        return Err(DktError::InvalidConfig("no models to compare".into()));
    }
    let table = load_csv(&a.data)?;
    let (train, config, normalization) = prepare(&table, &run)?;
    let test_table = load_csv(&a.test)?;
    let test = match &normalization {
        Some(p) => p.apply(&test_table)?,
        None => test_table.to_dataset()?,
    };
    let target = match a.target.clone().or(run.compare.target.clone()) {
        Some(t) => t,
        None => default_target(&train)?,
    };
    let mut options = TransferOptions::new(target, models);
    options.resamples = a.bootstrap;
    options.seed = run.optimizer.seed;
    options.spline_knots = run.compare.spline_knots;
    options.gp = run.compare.gp;
    if !options.models.contains(&options.reference) {
        options.reference = options.models[0];
    }
    let report = compare(&train, &test, &config, &options)?;
    emit_report(&report, &a.out)
}

#[derive(Debug, Serialize)]
struct CurveRow<'a> {
    disease: &'a str,
    curve: String,
    stage: f64,
    value: f64,
}

pub fn export_cmd(a: &ExportArgs, g: &Globals) -> Result<()> {
    g.threads(None)?;
    if a.grid < 2 {
        return Err(DktError::InvalidConfig("the stage grid needs at least 2 points".into()));
    }
    let saved = load_model(&a.model)?;
    let (config, model) = (&saved.config, &saved.model);
    let lo = model.beta.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = model.beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo {
        let pad = 0.2 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        // no spread to scale from
        (-1.0, 1.0)
    };
    let grid = stage_grid(lo, hi, a.grid);
    let mut w = csv::Writer::from_path(&a.out).map_err(|e| csv_error(&a.out, e))?;
    let mut put = |row: CurveRow| w.serialize(row).map_err(|e| csv_error(&a.out, e));
    for (d, disease) in config.diseases.iter().enumerate() {
        for (l, lambda) in model.lambda[d].iter().enumerate() {
            for &s in &grid {
                put(CurveRow {
                    disease,
                    curve: format!("unit{l}"),
                    stage: s,
                    value: lambda.eval(s),
                })?;
            }
        }
        for (k, name) in config.biomarkers.iter().enumerate() {
            for &s in &grid {
                put(CurveRow {
                    disease,
                    curve: name.clone(),
                    stage: s,
                    value: model.predict(config, d, s, 0.0, k),
                })?;
            }
        }
    }
    w.flush().map_err(|e| DktError::io(&a.out, e))?;
    println!(
        "exported {} curves on {} points over [{lo:.3}, {hi:.3}]",
        config.diseases.len() * (config.units + config.biomarkers.len()),
        a.grid
    );
    Ok(())
}
