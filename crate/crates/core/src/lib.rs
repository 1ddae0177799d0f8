//! Long-horizon trajectory forecasting with separated uncertainty.
//!
//! A deep ensemble of recurrent dynamics models captures epistemic
//! uncertainty. A recurrent conditional VAE trained on the residuals between
//! observed trajectories and individual ensemble-member rollouts captures the
//! aleatoric part without re-absorbing the ensemble spread. Forecasts combine
//! both and yield outcome probabilities, MMD curves and Brier scores.

pub mod aleatoric;
pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod ensemble;
pub mod env;
pub mod error;
pub mod forecast;
pub mod metrics;
pub mod numeric;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod residual;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
