//! Reference predictors the transfer model is compared against.

pub mod gp;
pub mod latent;
pub mod regress;

pub use gp::{GaussianProcess, GpHyperparameters, GpOptions};
pub use latent::{latent_initialize, latent_stage_fit, LatentConfig, LatentStageModel};
pub use regress::{linear_fit, spline_fit, UnivariateRegressor};
