//! Deep state-space time-series forecasting with global-local shrinkage.
//!
//! `dssh` trains a GRU-driven latent state-space model whose response is a
//! linear transform of shrinkage-regularized latent variables, fits it with
//! stochastic gradient variational Bayes, and forecasts by Monte Carlo
//! rollout. Everything — the tensor tape, the layers, the optimizer, the
//! samplers, the metrics — lives in this crate with no framework behind it.
//!
//! Start with the [`guide`] for a narrative tour, or jump to:
//!
//! - [`autodiff`] — tensors and the reverse-mode tape
//! - [`nn`] — MLP and GRU layers, Adam, checkpoints
//! - [`distributions`] — reparameterized samplers, closed-form KLs
//! - [`shrinkage`] — the regularized global-local shrinkage machinery
//! - [`model`] — generative/inference passes and the ELBO
//! - [`training`] — the SGVB loop
//! - [`forecasting`] — Monte Carlo sample paths and quantile bands
//! - [`data`] — simulators, the Kalman oracle, CSV panels, windowing
//! - [`evaluation`] — ND/RMSE, recovery rates, ablations

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod distributions;
pub mod error;
pub mod evaluation;
pub mod forecasting;
pub mod guide;
pub mod model;
pub mod nn;
pub mod rng;
pub mod shrinkage;
pub mod training;

pub use autodiff::{grad_check, Tape, Tensor, Var};
pub use error::{Error, Result};
