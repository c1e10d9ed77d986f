//! Disease knowledge transfer: a two-level sigmoid model of biomarker
//! progression shared across related diseases.
//!
//! Each subject has a latent disease stage (time shift plus visit time). A
//! disease-specific sigmoid maps the stage to a dysfunction score per
//! agnostic unit, and a disease-agnostic sigmoid maps that score to each
//! biomarker of the unit. Fitting alternates over trajectory, noise,
//! dysfunction and time-shift blocks. Biomarkers never observed in one
//! disease are then predicted through the units they share with another.

pub mod baselines;
pub mod error;
pub mod fit;
pub mod io;
pub mod model;
pub mod optim;
pub mod sigmoid;
pub mod stats;
pub mod synth;
pub mod transfer;

pub use error::{DktError, Result};
pub use fit::{
    fit, fit_from, initialize, predict_missing, stage_dataset, stage_subject, BlockUpdate, FitDiagnostics,
    Observation, OptimizerSpec, Prior, PriorSpec, SigmoidPriors,
};
pub use model::{
    biomarker_predict, dysfunction_score, neg_log_posterior, CohortDataset, FittedModel, Measurement,
    ModelConfig, Subject,
};
pub use sigmoid::{sigmoid_eval, SigmoidParams};
