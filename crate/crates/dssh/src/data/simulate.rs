//! Synthetic data generators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::SeriesBatch;
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::rng::{substream, STREAM_SIMULATE};

/// The linear-Gaussian benchmark process:
///
/// ```text
/// y_t = F·β_t + ε_t,          ε_t ~ N(0, obs_noise_var)
/// β_t = G·β_{t-1} + B·u_t + η_t,  η_t ~ N(0, state_noise_var·I)
/// u_t ~ U(-1, 1),   β_0 = 0
/// ```
///
/// State noise is iid per component.
#[derive(Debug, Clone)]
pub struct LinearSsmSpec {
    pub emission: [f64; 2],
    pub transition: [[f64; 2]; 2],
    pub covariate_loading: [f64; 2],
    pub obs_noise_var: f64,
    pub state_noise_var: f64,
}

impl Default for LinearSsmSpec {
    fn default() -> Self {
        LinearSsmSpec {
            emission: [1.0, 0.5],
            transition: [[0.7, 0.8], [0.0, 0.9]],
            covariate_loading: [-1.0, 0.9],
            obs_noise_var: 1.0,
            state_noise_var: 0.25,
        }
    }
}

impl LinearSsmSpec {
    pub const STATE_DIM: usize = 2;

    /// Stationary state covariance: the fixed point of
    /// `P = G·P·Gᵀ + B·Var(u)·Bᵀ + state_noise_var·I` (Var(u) = 1/3).
    pub fn lyapunov_state_cov(&self) -> [[f64; 2]; 2] {
        let g = self.transition;
        let b = self.covariate_loading;
        let var_u = 1.0 / 3.0;
        let mut p = [[0.0; 2]; 2];
        for _ in 0..2000 {
            let mut next = [[0.0; 2]; 2];
            for i in 0..2 {
                for j in 0..2 {
                    let mut acc = 0.0;
                    for k in 0..2 {
                        for l in 0..2 {
                            acc += g[i][k] * p[k][l] * g[j][l];
                        }
                    }
                    acc += b[i] * var_u * b[j];
                    if i == j {
                        acc += self.state_noise_var;
                    }
                    next[i][j] = acc;
                }
            }
            p = next;
        }
        p
    }

    /// Stationary marginal variance of y implied by the Lyapunov solution.
    pub fn lyapunov_y_var(&self) -> f64 {
        let p = self.lyapunov_state_cov();
        let f = self.emission;
        let mut v = self.obs_noise_var;
        for i in 0..2 {
            for j in 0..2 {
                v += f[i] * p[i][j] * f[j];
            }
        }
        v
    }
}

fn simulate_one(
    spec: &LinearSsmSpec,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    use rand_distr::StandardNormal;
    let mut beta = [0.0f64; 2];
    let mut y = Vec::with_capacity(len);
    let mut u = Vec::with_capacity(len);
    let mut latents = Vec::with_capacity(len * 2);
    let state_sd = spec.state_noise_var.sqrt();
    let obs_sd = spec.obs_noise_var.sqrt();
    for _ in 0..len {
        let u_t = rng.random::<f64>() * 2.0 - 1.0;
        let eta: [f64; 2] = [
            state_sd * rng.sample::<f64, _>(StandardNormal),
            state_sd * rng.sample::<f64, _>(StandardNormal),
        ];
        let next = [
            spec.transition[0][0] * beta[0]
                + spec.transition[0][1] * beta[1]
                + spec.covariate_loading[0] * u_t
                + eta[0],
            spec.transition[1][0] * beta[0]
                + spec.transition[1][1] * beta[1]
                + spec.covariate_loading[1] * u_t
                + eta[1],
        ];
        beta = next;
        let eps: f64 = obs_sd * rng.sample::<f64, _>(StandardNormal);
        y.push(spec.emission[0] * beta[0] + spec.emission[1] * beta[1] + eps);
        u.push(u_t);
        latents.extend_from_slice(&beta);
    }
    (y, u, latents)
}

fn assemble(
    spec: &LinearSsmSpec,
    n: usize,
    len: usize,
    seed: u64,
    stream: u64,
    id_prefix: &str,
    keep_latents: bool,
) -> Result<SeriesBatch> {
    let mut y = Vec::with_capacity(n * len);
    let mut u = Vec::with_capacity(n * len);
    let mut latents = Vec::with_capacity(if keep_latents { n * len * 2 } else { 0 });
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = substream(seed, &[STREAM_SIMULATE, stream, i as u64]);
        let (yi, ui, li) = simulate_one(spec, len, &mut rng);
        y.extend(yi);
        u.extend(ui);
        if keep_latents {
            latents.extend(li);
        }
        ids.push(format!("{id_prefix}{i:04}"));
    }
    let mut batch = SeriesBatch::new(
        Tensor::new(vec![n, len, 1], y)?,
        Tensor::new(vec![n, len, 1], u)?,
        vec![len; n],
        ids,
    )?;
    if keep_latents {
        batch.latents = Some(Tensor::new(vec![n, len, 2], latents)?);
    }
    Ok(batch)
}

/// Simulates the benchmark process: `n_train` training series and `n_test`
/// test series of length `len`, on independent substreams. Test series carry
/// their true latent paths.
pub fn simulate_linear_ssm(
    spec: &LinearSsmSpec,
    n_train: usize,
    n_test: usize,
    len: usize,
    seed: u64,
) -> Result<(SeriesBatch, SeriesBatch)> {
    let train = assemble(spec, n_train, len, seed, 0, "train-", false)?;
    let test = assemble(spec, n_test, len, seed, 1, "test-", true)?;
    Ok((train, test))
}

/// Seasonal panel: `scale · (1 + 0.5·sin(2πt/period) + slope·t + AR(1))`
/// per series, scales log-uniform over `10^scale_log10_range`, hour-of-period
/// one-hot covariates.
#[derive(Debug, Clone)]
pub struct SeasonalPanelSpec {
    pub n_series: usize,
    pub len: usize,
    pub period: usize,
    /// AR(1) innovation standard deviation.
    pub noise_std: f64,
    /// AR(1) coefficient.
    pub ar_coeff: f64,
    /// Per-series linear drift over the whole series is at most this
    /// fraction of the base level.
    pub trend_scale: f64,
    pub scale_log10_range: (f64, f64),
    pub seed: u64,
}

impl Default for SeasonalPanelSpec {
    fn default() -> Self {
        SeasonalPanelSpec {
            n_series: 100,
            len: 1000,
            period: 24,
            noise_std: 0.1,
            ar_coeff: 0.7,
            trend_scale: 0.3,
            scale_log10_range: (0.0, 2.0),
            seed: 0,
        }
    }
}

/// Stationary AR(1) path `x_t = ρ·x_{t-1} + σ·z_t`.
pub(crate) fn ar1_noise(rho: f64, sigma: f64, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand_distr::StandardNormal;
    let mut out = Vec::with_capacity(len);
    let stationary_sd = if rho.abs() < 1.0 {
        sigma / (1.0 - rho * rho).sqrt()
    } else {
        sigma
    };
    let mut x = stationary_sd * rng.sample::<f64, _>(StandardNormal);
    for _ in 0..len {
        out.push(x);
        x = rho * x + sigma * rng.sample::<f64, _>(StandardNormal);
    }
    out
}

pub fn simulate_seasonal_panel(spec: &SeasonalPanelSpec) -> Result<SeriesBatch> {
    if spec.period < 2 {
        return Err(crate::error::Error::Config("period must be >= 2".into()));
    }
    let (n, len, period) = (spec.n_series, spec.len, spec.period);
    let mut y = Vec::with_capacity(n * len);
    let mut u = vec![0.0; n * len * period];
    let mut ids = Vec::with_capacity(n);
    let (lo, hi) = spec.scale_log10_range;
    for i in 0..n {
        let mut rng = substream(spec.seed, &[STREAM_SIMULATE, 2, i as u64]);
        let scale = 10f64.powf(lo + (hi - lo) * rng.random::<f64>());
        let slope = (rng.random::<f64>() * 2.0 - 1.0) * spec.trend_scale / len as f64;
        let noise = ar1_noise(spec.ar_coeff, spec.noise_std, len, &mut rng);
        for (t, x) in noise.iter().enumerate() {
            let seasonal = 0.5 * (2.0 * std::f64::consts::PI * t as f64 / period as f64).sin();
            y.push(scale * (1.0 + seasonal + slope * t as f64 + x));
            u[(i * len + t) * period + t % period] = 1.0;
        }
        ids.push(format!("panel-{i:03}"));
    }
    SeriesBatch::new(
        Tensor::new(vec![n, len, 1], y)?,
        Tensor::new(vec![n, len, period], u)?,
        vec![len; n],
        ids,
    )
}
