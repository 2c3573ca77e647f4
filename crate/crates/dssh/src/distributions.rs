//! Reparameterized samplers and KL divergences.
//!
//! Normal and log-normal variates are drawn as deterministic transforms of
//! external standard-normal noise, so gradients flow through the location and
//! scale parameters only. The KL divergences against Normal, Gamma and
//! inverse-Gamma targets are closed forms; [`mc_kl_oracle`] is the
//! independent Monte Carlo estimate every closed form is checked against.
//!
//! Gamma/inverse-Gamma conventions: `G(a, b)` has density ∝ x^{a−1} e^{−x/b}
//! (shape `a`, scale `b`); `IG(a, b)` has density ∝ x^{−a−1} e^{−b/x}.

use rand_chacha::ChaCha8Rng;
use statrs::function::gamma::ln_gamma;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Exponent cap for log-normal sampling; `exp(700)` is near the f64 limit.
pub const LOGNORMAL_EXP_CAP: f64 = 700.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_74; // ln(2π)/2
const HALF_LN_2PI_E: f64 = 1.418_938_533_204_672_7; // ln(2πe)/2

fn check_positive(v: &Var<'_>, op: &'static str, what: &str) -> Result<()> {
    if v.value().iter().any(|x| *x <= 0.0) {
        return Err(Error::Domain {
            op,
            detail: format!("{what} must be strictly positive"),
        });
    }
    Ok(())
}

/// Diagonal Normal with strictly positive scale.
#[derive(Clone, Copy)]
pub struct NormalParams<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
}

impl<'t> NormalParams<'t> {
    pub fn new(mu: Var<'t>, sigma: Var<'t>) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::ShapeMismatch {
                op: "NormalParams",
                lhs: mu.shape(),
                rhs: sigma.shape(),
            });
        }
        check_positive(&sigma, "NormalParams", "sigma")?;
        Ok(NormalParams { mu, sigma })
    }
}

/// Log-normal: `log X ~ N(mu, sigma²)`.
#[derive(Clone, Copy)]
pub struct LogNormalParams<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
}

impl<'t> LogNormalParams<'t> {
    pub fn new(mu: Var<'t>, sigma: Var<'t>) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::ShapeMismatch {
                op: "LogNormalParams",
                lhs: mu.shape(),
                rhs: sigma.shape(),
            });
        }
        check_positive(&sigma, "LogNormalParams", "sigma")?;
        Ok(LogNormalParams { mu, sigma })
    }
}

/// Gamma prior hyperparameters (shape, scale).
#[derive(Debug, Clone, Copy)]
pub struct GammaParams {
    pub shape: f64,
    pub scale: f64,
}

impl GammaParams {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if shape <= 0.0 || scale <= 0.0 {
            return Err(Error::domain("GammaParams", "shape and scale must be > 0"));
        }
        Ok(GammaParams { shape, scale })
    }
}

/// Inverse-Gamma prior hyperparameters (shape, scale).
#[derive(Debug, Clone, Copy)]
pub struct InvGammaParams {
    pub shape: f64,
    pub scale: f64,
}

impl InvGammaParams {
    pub fn new(shape: f64, scale: f64) -> Result<Self> {
        if shape <= 0.0 || scale <= 0.0 {
            return Err(Error::domain("InvGammaParams", "shape and scale must be > 0"));
        }
        Ok(InvGammaParams { shape, scale })
    }
}

/// `μ + σ⊙ε` for external standard-normal noise `ε`.
pub fn sample_normal_reparam<'t>(p: &NormalParams<'t>, noise: &Var<'t>) -> Result<Var<'t>> {
    if noise.shape() != p.mu.shape() {
        return Err(Error::ShapeMismatch {
            op: "sample_normal_reparam",
            lhs: noise.shape(),
            rhs: p.mu.shape(),
        });
    }
    p.mu.add(&p.sigma.mul(noise)?)
}

/// `exp(μ + σ⊙ε)`, exponent capped at [`LOGNORMAL_EXP_CAP`] (capped elements
/// are counted on the tape). Strictly positive.
pub fn sample_lognormal_reparam<'t>(p: &LogNormalParams<'t>, noise: &Var<'t>) -> Result<Var<'t>> {
    if noise.shape() != p.mu.shape() {
        return Err(Error::ShapeMismatch {
            op: "sample_lognormal_reparam",
            lhs: noise.shape(),
            rhs: p.mu.shape(),
        });
    }
    let exponent = p.mu.add(&p.sigma.mul(noise)?)?.clamp_max(LOGNORMAL_EXP_CAP);
    Ok(exponent.exp())
}

/// Closed-form `KL(q‖p)` between diagonal Normals on `[batch × Q]` inputs:
/// `log(σp/σq) + (σq² + (μq−μp)²)/(2σp²) − ½` per element, summed over the
/// latent axis. Returns a `[batch]` vector.
pub fn kl_normal_normal<'t>(q: &NormalParams<'t>, p: &NormalParams<'t>) -> Result<Var<'t>> {
    if q.mu.shape() != p.mu.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_normal_normal",
            lhs: q.mu.shape(),
            rhs: p.mu.shape(),
        });
    }
    let log_ratio = p.sigma.log()?.sub(&q.sigma.log()?)?;
    let var_q = q.sigma.square();
    let mean_gap = q.mu.sub(&p.mu)?.square();
    let quad = var_q
        .add(&mean_gap)?
        .div(&p.sigma.square().mul_scalar(2.0))?;
    let per_element = log_ratio.add(&quad)?.add_scalar(-0.5);
    per_element.sum_axis(1)
}

/// Closed-form `KL(LN(μ,σ) ‖ G(a,b))`, elementwise:
/// `ln Γ(a) + a·ln b − a·μ − ½ln(2πeσ²) + (1/b)·exp(μ + σ²/2)`.
pub fn kl_lognormal_gamma<'t>(q: &LogNormalParams<'t>, prior: GammaParams) -> Result<Var<'t>> {
    let (a, b) = (prior.shape, prior.scale);
    let constant = ln_gamma(a) + a * b.ln() - HALF_LN_2PI_E;
    let mean_term = q.mu.mul_scalar(-a);
    let entropy_term = q.sigma.log()?.neg();
    let moment = q
        .mu
        .add(&q.sigma.square().mul_scalar(0.5))?
        .clamp_max(LOGNORMAL_EXP_CAP)
        .exp()
        .mul_scalar(1.0 / b);
    Ok(mean_term
        .add(&entropy_term)?
        .add(&moment)?
        .add_scalar(constant))
}

/// Closed-form `KL(LN(μ,σ) ‖ IG(a,b))`, elementwise:
/// `ln Γ(a) − a·ln b + a·μ − ½ln(2πeσ²) + b·exp(−μ + σ²/2)`.
pub fn kl_lognormal_invgamma<'t>(
    q: &LogNormalParams<'t>,
    prior: InvGammaParams,
) -> Result<Var<'t>> {
    let (a, b) = (prior.shape, prior.scale);
    let constant = ln_gamma(a) - a * b.ln() - HALF_LN_2PI_E;
    let mean_term = q.mu.mul_scalar(a);
    let entropy_term = q.sigma.log()?.neg();
    let moment = q
        .mu
        .neg()
        .add(&q.sigma.square().mul_scalar(0.5))?
        .clamp_max(LOGNORMAL_EXP_CAP)
        .exp()
        .mul_scalar(b);
    Ok(mean_term
        .add(&entropy_term)?
        .add(&moment)?
        .add_scalar(constant))
}

// ───────────────────────── plain-f64 densities ─────────────────────────

pub fn normal_logpdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -HALF_LN_2PI - sigma.ln() - 0.5 * z * z
}

pub fn lognormal_logpdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x.ln() - mu) / sigma;
    -x.ln() - sigma.ln() - HALF_LN_2PI - 0.5 * z * z
}

pub fn gamma_logpdf(x: f64, shape: f64, scale: f64) -> f64 {
    (shape - 1.0) * x.ln() - x / scale - ln_gamma(shape) - shape * scale.ln()
}

pub fn invgamma_logpdf(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// Monte Carlo KL estimate `(1/n)·Σ [log q(xᵢ) − log p(xᵢ)]`, `xᵢ ~ q`,
/// with its standard error. Deterministic per seed.
pub fn mc_kl_oracle_se<S, Q, P>(
    mut q_sampler: S,
    q_logpdf: Q,
    p_logpdf: P,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    S: FnMut(&mut ChaCha8Rng) -> f64,
    Q: Fn(f64) -> f64,
    P: Fn(f64) -> f64,
{
    assert!(n >= 1);
    const ORACLE_TAG: u64 = 0x0AC1E;
    let mut rng = substream(seed, &[ORACLE_TAG]);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for i in 0..n {
        let x = q_sampler(&mut rng);
        let term = q_logpdf(x) - p_logpdf(x);
        if !term.is_finite() {
            return Err(Error::NonFinite {
                at: "mc_kl_oracle",
                detail: format!("log q − log p at sample {i} (x = {x})"),
            });
        }
        sum += term;
        sum_sq += term * term;
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    let se = (var / n as f64).sqrt();
    Ok((mean, se))
}

/// [`mc_kl_oracle_se`] without the standard error.
pub fn mc_kl_oracle<S, Q, P>(q_sampler: S, q_logpdf: Q, p_logpdf: P, n: usize, seed: u64) -> Result<f64>
where
    S: FnMut(&mut ChaCha8Rng) -> f64,
    Q: Fn(f64) -> f64,
    P: Fn(f64) -> f64,
{
    mc_kl_oracle_se(q_sampler, q_logpdf, p_logpdf, n, seed).map(|(kl, _)| kl)
}

/// Draws one LN(mu, sigma) variate from a standard-normal transform.
pub fn draw_lognormal(rng: &mut ChaCha8Rng, mu: f64, sigma: f64) -> f64 {
    use rand::Rng;
    let z: f64 = rng.sample(rand_distr::StandardNormal);
    (mu + sigma * z).min(LOGNORMAL_EXP_CAP).exp()
}
