use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dkt", version, about = "Disease knowledge transfer: fit, stage, predict and evaluate")]
pub struct Cli {
    /// Worker threads for parallel fitting and resampling.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Overrides the seed of the run configuration or spec.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Repeat for more progress output on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic cohort with known parameters.
    Generate(GenerateArgs),
    /// Residualize and normalize a raw dataset.
    Preprocess(PreprocessArgs),
    /// Fit the model to a dataset.
    Fit(FitArgs),
    /// Estimate subject time shifts with a fitted model.
    Stage(StageArgs),
    /// Predict biomarkers for every visit of every subject.
    Predict(PredictArgs),
    /// Score predictions against measured values.
    Evaluate(EvaluateArgs),
    /// Train several models and tabulate their transfer performance.
    Compare(CompareArgs),
    /// Sample fitted trajectories on a stage grid.
    ExportCurves(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Spec file, or `default` for the built-in two-disease cohort.
    #[arg(long, default_value = "default")]
    pub spec: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the fitted residualization and scaling.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_sweeps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Stage from these biomarkers only (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub using: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Biomarkers to predict (comma separated).
    #[arg(long, value_delimiter = ',', required = true)]
    pub biomarkers: Vec<String>,
    /// Stage from these biomarkers; defaults to all others.
    #[arg(long, value_delimiter = ',')]
    pub using: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub bootstrap: usize,
    /// Report prefix; writes `<out>.csv` and `<out>.txt`.
    #[arg(long)]
    pub out: PathBuf,
    /// Row label of the predictions.
    #[arg(long, default_value = "DKT")]
    pub label: String,
    /// Fitted model, for time-shift recovery against a `true_beta` column.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Generating spec (file or `default`), for trajectory recovery.
    #[arg(long, requires = "model")]
    pub spec: Option<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "dkt,latent,gp,spline,linear")]
    pub models: Vec<String>,
    /// Disease to predict; defaults to the one with the fewest biomarkers.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub bootstrap: usize,
    /// Table prefix; writes `<out>.csv` and `<out>.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub grid: usize,
    #[arg(long)]
    pub out: PathBuf,
}
