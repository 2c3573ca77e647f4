//! Global-local shrinkage machinery.
//!
//! Latent scales follow half-Cauchy priors realized through their
//! Gamma × inverse-Gamma product decomposition: per-step locals
//! `λ² = α·β` with `α ~ G(0.5, 1)`, `β ~ IG(0.5, 1)`, and a global
//! `τ² = α_τ·β_τ` with `α_τ ~ G(0.5, τ₀²)`, `β_τ ~ IG(0.5, 1)`. A weight
//! decay variable `c² ~ IG(c₀, c₁)` soft-truncates the heavy upper tail
//! through the regularized scale `τ*² = c²τ² / (c² + τ²λ²)`. Approximate
//! posteriors are log-normal throughout, so every KL term is closed-form.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::distributions::{
    kl_lognormal_gamma, kl_lognormal_invgamma, sample_lognormal_reparam, GammaParams,
    InvGammaParams, LogNormalParams,
};
use crate::error::{Error, Result};

/// Hyperparameters of the shrinkage prior.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShrinkageHyper {
    /// Half-Cauchy scale of the global shrinkage variable τ.
    pub tau0: f64,
    /// Inverse-Gamma shape for c².
    pub c0: f64,
    /// Inverse-Gamma scale for c².
    pub c1: f64,
}

impl Default for ShrinkageHyper {
    fn default() -> Self {
        ShrinkageHyper {
            tau0: 1.0,
            c0: 2.0,
            c1: 1.0,
        }
    }
}

impl ShrinkageHyper {
    pub fn validate(&self) -> Result<()> {
        if self.tau0 <= 0.0 || self.c0 <= 0.0 || self.c1 <= 0.0 {
            return Err(Error::Config(
                "shrinkage hyperparameters must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

/// One reparameterized draw of the per-step local shrinkage variables.
pub struct LocalShrinkageSample<'t> {
    pub alpha: Var<'t>,
    pub beta: Var<'t>,
    /// `λ² = α ⊙ β`, `[batch × Q]`.
    pub lambda_sq: Var<'t>,
    pub q_alpha: LogNormalParams<'t>,
    pub q_beta: LogNormalParams<'t>,
}

/// One reparameterized draw of the global shrinkage variables.
pub struct GlobalShrinkageSample<'t> {
    pub alpha_tau: Var<'t>,
    pub beta_tau: Var<'t>,
    /// `τ² = α_τ · β_τ`, `[batch × 1]`.
    pub tau_sq: Var<'t>,
    /// `c²`, `[batch × 1]`.
    pub c_sq: Var<'t>,
    pub q_alpha_tau: LogNormalParams<'t>,
    pub q_beta_tau: LogNormalParams<'t>,
    pub q_c: LogNormalParams<'t>,
}

fn check_positive(v: &Var<'_>, what: &str) -> Result<()> {
    if v.value().iter().any(|x| *x <= 0.0) {
        return Err(Error::Domain {
            op: "regularized_tau_star_sq",
            detail: format!("{what} must be strictly positive"),
        });
    }
    Ok(())
}

/// The regularized global scale `τ*² = c²τ² / (c² + τ²λ²)`, elementwise over
/// `[batch × Q]`. `tau_sq`/`c_sq` may be `[batch × 1]` (broadcast over Q) or
/// already `[batch × Q]`.
///
/// When `τ²λ² ≫ c²` the product `τ*²λ²` saturates at `c²`; when `τ²λ² ≪ c²`
/// it collapses to the plain horseshoe scale `τ²λ²`.
pub fn regularized_tau_star_sq<'t>(
    tau_sq: &Var<'t>,
    c_sq: &Var<'t>,
    lambda_sq: &Var<'t>,
) -> Result<Var<'t>> {
    check_positive(tau_sq, "tau_sq")?;
    check_positive(c_sq, "c_sq")?;
    check_positive(lambda_sq, "lambda_sq")?;
    let q = lambda_sq.shape()[1];
    let widen = |v: &Var<'t>| -> Result<Var<'t>> {
        if v.shape() == lambda_sq.shape() {
            Ok(*v)
        } else {
            v.broadcast_cols(q)
        }
    };
    let tau_sq = widen(tau_sq)?;
    let c_sq = widen(c_sq)?;
    let numer = c_sq.mul(&tau_sq)?;
    let denom = c_sq.add(&tau_sq.mul(lambda_sq)?)?;
    numer.div(&denom)
}

/// KL of the local log-normal posteriors against the fixed
/// `G(0.5, 1) × IG(0.5, 1)` prior, summed over the latent axis. `[batch]`.
pub fn prior_local_kl<'t>(
    q_alpha: &LogNormalParams<'t>,
    q_beta: &LogNormalParams<'t>,
) -> Result<Var<'t>> {
    let kl_a = kl_lognormal_gamma(q_alpha, GammaParams::new(0.5, 1.0)?)?;
    let kl_b = kl_lognormal_invgamma(q_beta, InvGammaParams::new(0.5, 1.0)?)?;
    kl_a.add(&kl_b)?.sum_axis(1)
}

/// KL of the global posteriors against
/// `G(0.5, τ₀²) × IG(0.5, 1) × IG(c₀, c₁)`. `[batch]`.
pub fn prior_global_kl<'t>(
    q_alpha_tau: &LogNormalParams<'t>,
    q_beta_tau: &LogNormalParams<'t>,
    q_c: &LogNormalParams<'t>,
    hyper: &ShrinkageHyper,
) -> Result<Var<'t>> {
    hyper.validate()?;
    let kl_at = kl_lognormal_gamma(q_alpha_tau, GammaParams::new(0.5, hyper.tau0 * hyper.tau0)?)?
        .sum_axis(1)?;
    let kl_bt =
        kl_lognormal_invgamma(q_beta_tau, InvGammaParams::new(0.5, 1.0)?)?.sum_axis(1)?;
    let kl_c =
        kl_lognormal_invgamma(q_c, InvGammaParams::new(hyper.c0, hyper.c1)?)?.sum_axis(1)?;
    kl_at.add(&kl_bt)?.add(&kl_c)
}

/// Splits a `[batch × 2w]` head into a log-normal posterior: first `w`
/// columns are μ, the rest log σ (exponentiated to keep σ positive across
/// orders of magnitude).
pub fn lognormal_from_head<'t>(head: &Var<'t>, width: usize) -> Result<LogNormalParams<'t>> {
    let shape = head.shape();
    if shape.len() != 2 || shape[1] != 2 * width {
        return Err(Error::ShapeMismatch {
            op: "lognormal_from_head",
            lhs: shape,
            rhs: vec![0, 2 * width],
        });
    }
    let mu = head.slice_cols(0, width)?;
    let sigma = head.slice_cols(width, 2 * width)?.exp();
    LogNormalParams::new(mu, sigma)
}

/// Draws the local shrinkage sample from a `[batch × 4Q]` posterior head
/// laid out as `(μ_α, log σ_α, μ_β, log σ_β)`, using `[batch × 2Q]`
/// standard-normal noise (α block first).
pub fn sample_local_posterior<'t>(
    head_out: &Var<'t>,
    noise: &Var<'t>,
) -> Result<LocalShrinkageSample<'t>> {
    let shape = head_out.shape();
    if shape.len() != 2 || shape[1] % 4 != 0 {
        return Err(Error::ShapeMismatch {
            op: "sample_local_posterior",
            lhs: shape,
            rhs: vec![0, 4],
        });
    }
    let q = shape[1] / 4;
    if noise.shape() != [shape[0], 2 * q] {
        return Err(Error::ShapeMismatch {
            op: "sample_local_posterior",
            lhs: noise.shape(),
            rhs: vec![shape[0], 2 * q],
        });
    }
    let q_alpha = lognormal_from_head(&head_out.slice_cols(0, 2 * q)?, q)?;
    let q_beta = lognormal_from_head(&head_out.slice_cols(2 * q, 4 * q)?, q)?;
    let alpha = sample_lognormal_reparam(&q_alpha, &noise.slice_cols(0, q)?)?;
    let beta = sample_lognormal_reparam(&q_beta, &noise.slice_cols(q, 2 * q)?)?;
    let lambda_sq = alpha.mul(&beta)?;
    Ok(LocalShrinkageSample {
        alpha,
        beta,
        lambda_sq,
        q_alpha,
        q_beta,
    })
}

/// Draws the global shrinkage sample from three `[batch × 2]` posterior
/// heads (α_τ, β_τ, c²) and `[batch × 3]` standard-normal noise.
pub fn sample_global_posterior<'t>(
    head_alpha_tau: &Var<'t>,
    head_beta_tau: &Var<'t>,
    head_c: &Var<'t>,
    noise: &Var<'t>,
) -> Result<GlobalShrinkageSample<'t>> {
    let batch = head_alpha_tau.shape()[0];
    if noise.shape() != [batch, 3] {
        return Err(Error::ShapeMismatch {
            op: "sample_global_posterior",
            lhs: noise.shape(),
            rhs: vec![batch, 3],
        });
    }
    let q_alpha_tau = lognormal_from_head(head_alpha_tau, 1)?;
    let q_beta_tau = lognormal_from_head(head_beta_tau, 1)?;
    let q_c = lognormal_from_head(head_c, 1)?;
    let alpha_tau = sample_lognormal_reparam(&q_alpha_tau, &noise.slice_cols(0, 1)?)?;
    let beta_tau = sample_lognormal_reparam(&q_beta_tau, &noise.slice_cols(1, 2)?)?;
    let c_sq = sample_lognormal_reparam(&q_c, &noise.slice_cols(2, 3)?)?;
    let tau_sq = alpha_tau.mul(&beta_tau)?;
    Ok(GlobalShrinkageSample {
        alpha_tau,
        beta_tau,
        tau_sq,
        c_sq,
        q_alpha_tau,
        q_beta_tau,
        q_c,
    })
}
