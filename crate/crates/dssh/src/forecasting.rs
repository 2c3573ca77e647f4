//! Monte Carlo forecasting.
//!
//! A forecast conditions on history through the inference network (sampling
//! the latent posterior step by step), then rolls the generative model
//! forward over the horizon: the GRU is fed the previous *sampled* response,
//! shrinkage comes from its approximate posterior (or the prior, behind a
//! switch), the latent from the generative heads, and the response from the
//! decoder. Each sample path owns an RNG substream derived from
//! `(seed, path index)`, so results are identical under any thread count.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::model::{LambdaForecastMode, LocalDraw, Model, ModelConfig, StepNoise};
use crate::nn::ParameterStore;
use crate::rng::{standard_normals, substream, STREAM_FORECAST};
use crate::training::standardize;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastConfig {
    /// Horizon length p.
    pub horizon: usize,
    /// Monte Carlo sample paths n.
    pub num_samples: usize,
    pub quantiles: Vec<f64>,
    pub seed: u64,
    #[serde(default)]
    pub lambda_mode: LambdaForecastMode,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            horizon: 20,
            num_samples: 50,
            quantiles: vec![0.05, 0.5, 0.95],
            seed: 0,
            lambda_mode: LambdaForecastMode::Posterior,
        }
    }
}

impl ForecastConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.num_samples == 0 {
            return Err(Error::Config("horizon and num_samples must be >= 1".into()));
        }
        if self.quantiles.iter().any(|q| !(0.0 < *q && *q < 1.0)) {
            return Err(Error::Config("quantiles must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-coordinate interventions applied during rollout (ablation harness).
/// Masks are `[horizon × Q]`, row-major.
#[derive(Debug, Clone, Default)]
pub struct RolloutIntervention {
    /// Replace the shrinkage scale `τ*λ` by 1 at masked coordinates.
    pub unit_scale: Option<Vec<bool>>,
    /// Zero the latent at masked coordinates.
    pub zero_latent: Option<Vec<bool>>,
}

/// Monte Carlo forecast: de-standardized response sample paths with derived
/// quantile bands, plus the latent and shrinkage-scale paths that produced
/// them (in standardized model space).
#[derive(Debug, Clone)]
pub struct ForecastResult {
    /// `[n × p × M]`, original data scale.
    pub samples: Tensor,
    /// `[n × p × Q]`.
    pub latent_samples: Tensor,
    /// `[n × p × Q]`, the applied `τ*λ` per coordinate.
    pub shrink_scales: Tensor,
    /// Per requested level, `[p × M]` bands over the samples.
    pub quantiles: Vec<(f64, Tensor)>,
    /// Standardization factor of the conditioning history.
    pub scale: f64,
}

impl ForecastResult {
    pub fn num_samples(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn obs_dim(&self) -> usize {
        self.samples.shape()[2]
    }

    pub fn quantile(&self, level: f64) -> Option<&Tensor> {
        self.quantiles
            .iter()
            .find(|(l, _)| (*l - level).abs() < 1e-12)
            .map(|(_, t)| t)
    }

    /// Forecast export CSV: `t,series_id,quantile,dim,value`.
    pub fn write_bands_csv(&self, path: &std::path::Path, series_id: &str) -> Result<()> {
        let mut out = String::from("t,series_id,quantile,dim,value\n");
        for (level, band) in &self.quantiles {
            for t in 0..self.horizon() {
                for d in 0..self.obs_dim() {
                    out.push_str(&format!(
                        "{t},{series_id},{level},{d},{:.17e}\n",
                        band.at(t, d)
                    ));
                }
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Raw sample dump in the checkpoint framing.
    pub fn save_binary(&self, path: &std::path::Path) -> Result<()> {
        let mut store = ParameterStore::new();
        store.insert("samples", self.samples.clone())?;
        store.insert("latent_samples", self.latent_samples.clone())?;
        store.insert("shrink_scales", self.shrink_scales.clone())?;
        store.insert("scale", Tensor::scalar(self.scale))?;
        for (level, band) in &self.quantiles {
            store.insert(format!("quantile.{level}"), band.clone())?;
        }
        store.save(path, None)
    }
}

/// Type-7 empirical quantile (R default): linear interpolation between order
/// statistics. `values` need not be sorted.
pub fn empirical_quantile(values: &mut [f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN samples"));
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= n {
        values[n - 1]
    } else {
        values[lo] + frac * (values[lo + 1] - values[lo])
    }
}

pub(crate) enum NoiseSource {
    Stream(ChaCha8Rng),
    /// Every draw is zero (reparameterized samples collapse to their
    /// location parameter). Test hook.
    #[cfg_attr(not(test), allow(dead_code))]
    Zeros,
}

impl NoiseSource {
    fn normals(&mut self, n: usize) -> Vec<f64> {
        match self {
            NoiseSource::Stream(rng) => standard_normals(rng, n),
            NoiseSource::Zeros => vec![0.0; n],
        }
    }

    fn gamma_invgamma_pairs(&mut self, q: usize) -> Vec<f64> {
        match self {
            NoiseSource::Stream(rng) => {
                // α ~ G(0.5, 1); β ~ IG(0.5, 1) via reciprocal of G(0.5, 1)
                let gamma = rand_distr::Gamma::new(0.5, 1.0).expect("valid shape/scale");
                let mut out = Vec::with_capacity(2 * q);
                for _ in 0..q {
                    out.push(rng.sample(gamma));
                }
                for _ in 0..q {
                    let g: f64 = rng.sample(gamma);
                    out.push(1.0 / g.max(1e-300));
                }
                out
            }
            // medians of the two prior factors are scale-free stand-ins
            NoiseSource::Zeros => {
                let mut out = vec![0.455; q]; // median of G(0.5, 1)
                out.extend(vec![1.0 / 0.455; q]);
                out
            }
        }
    }
}

/// Runs the inference model over the conditioning range, optionally
/// recording the sampled latent path. Returns the final carried state.
fn condition_path<'t>(
    model: &Model<'t>,
    history: &SeriesBatch,
    noise: &mut NoiseSource,
    mut record: Option<&mut Vec<f64>>,
) -> Result<crate::model::StepState<'t>> {
    let tape = model.tape();
    let q = model.cfg().latent_dim;
    let len = history.lengths[0];

    let pooled = tape.constant(Tensor::row(&history.mean_y(0)));
    let g_noise = tape.constant(Tensor::row(&noise.normals(3)));
    let (globals, _) = model.sample_globals(&pooled, &g_noise)?;

    let mut state = model.initial_state(1);
    for t in 0..len {
        let y_t = tape.constant(Tensor::row(history.y_row(0, t)));
        let u_t = tape.constant(Tensor::row(history.u_row(0, t)));
        let step_noise = StepNoise {
            local: tape.constant(Tensor::row(&noise.normals(2 * q))),
            z: tape.constant(Tensor::row(&noise.normals(q))),
        };
        let (_, next) = model.step_elbo(&y_t, &u_t, &state, &globals, &step_noise)?;
        if let Some(rec) = record.as_deref_mut() {
            rec.extend_from_slice(next.z.value().data());
        }
        state = next;
    }
    Ok(state)
}

struct PathOutput {
    y: Vec<f64>,
    z: Vec<f64>,
    scales: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn run_path(
    cfg: &ModelConfig,
    params: &ParameterStore,
    history: &SeriesBatch,
    future_covariates: &Tensor,
    horizon: usize,
    lambda_mode: LambdaForecastMode,
    intervention: Option<&RolloutIntervention>,
    noise: &mut NoiseSource,
) -> Result<PathOutput> {
    let tape = Tape::new();
    let model = Model::bind(&tape, cfg, params, false)?;
    let q = cfg.latent_dim;
    let m = cfg.obs_dim;

    // globals are drawn once per path and shared by conditioning and rollout
    let pooled = tape.constant(Tensor::row(&history.mean_y(0)));
    let g_noise = tape.constant(Tensor::row(&noise.normals(3)));
    let (globals, _) = model.sample_globals(&pooled, &g_noise)?;

    let mut state = model.initial_state(1);
    for t in 0..history.lengths[0] {
        let y_t = tape.constant(Tensor::row(history.y_row(0, t)));
        let u_t = tape.constant(Tensor::row(history.u_row(0, t)));
        let step_noise = StepNoise {
            local: tape.constant(Tensor::row(&noise.normals(2 * q))),
            z: tape.constant(Tensor::row(&noise.normals(q))),
        };
        let (_, next) = model.step_elbo(&y_t, &u_t, &state, &globals, &step_noise)?;
        state = next;
    }

    let mut out = PathOutput {
        y: Vec::with_capacity(horizon * m),
        z: Vec::with_capacity(horizon * q),
        scales: Vec::with_capacity(horizon * q),
    };
    for t in 0..horizon {
        let u_row: Vec<f64> = (0..future_covariates.shape()[1])
            .map(|j| future_covariates.at(t, j))
            .collect();
        let u_t = tape.constant(Tensor::row(&u_row));
        let local = match lambda_mode {
            LambdaForecastMode::Posterior => LocalDraw::Posterior {
                noise: tape.constant(Tensor::row(&noise.normals(2 * q))),
            },
            LambdaForecastMode::Prior => LocalDraw::Prior {
                alpha_beta: tape.constant(Tensor::row(&noise.gamma_invgamma_pairs(q))),
            },
        };
        let z_noise = tape.constant(Tensor::row(&noise.normals(q)));
        let y_noise = tape.constant(Tensor::row(&noise.normals(m)));
        let masks = |field: &Option<Vec<bool>>| -> Option<Vec<bool>> {
            field.as_ref().map(|m| m[t * q..(t + 1) * q].to_vec())
        };
        let (unit_mask, zero_mask) = match intervention {
            Some(iv) => (masks(&iv.unit_scale), masks(&iv.zero_latent)),
            None => (None, None),
        };
        let (next, y, z, scale) = model.rollout_step(
            &u_t,
            &state,
            &globals,
            &local,
            &z_noise,
            &y_noise,
            unit_mask.as_deref(),
            zero_mask.as_deref(),
        )?;
        out.y.extend_from_slice(y.value().data());
        out.z.extend_from_slice(z.value().data());
        out.scales.extend_from_slice(scale.value().data());
        state = next;
    }
    Ok(out)
}

/// Forecasts `cfg.horizon` steps ahead of `history` (a single raw series)
/// given covariates for the horizon, `[p × N]`.
pub fn forecast(
    model_cfg: &ModelConfig,
    params: &ParameterStore,
    history: &SeriesBatch,
    future_covariates: &Tensor,
    cfg: &ForecastConfig,
) -> Result<ForecastResult> {
    forecast_with_intervention(model_cfg, params, history, future_covariates, cfg, None)
}

/// [`forecast`] with rollout interventions (ablation harness).
pub fn forecast_with_intervention(
    model_cfg: &ModelConfig,
    params: &ParameterStore,
    history: &SeriesBatch,
    future_covariates: &Tensor,
    cfg: &ForecastConfig,
    intervention: Option<&RolloutIntervention>,
) -> Result<ForecastResult> {
    cfg.validate()?;
    if history.n_series() != 1 {
        return Err(Error::Data("forecast expects a single-series history".into()));
    }
    if history.lengths[0] == 0 {
        return Err(Error::Data("forecast needs at least one history step".into()));
    }
    let p = cfg.horizon;
    if future_covariates.rank() != 2
        || future_covariates.shape()[0] < p
        || future_covariates.shape()[1] != model_cfg.covariate_dim
    {
        return Err(Error::Data(format!(
            "horizon covariates {:?} do not cover {p} steps of width {}",
            future_covariates.shape(),
            model_cfg.covariate_dim
        )));
    }

    let std_history = standardize(history);
    let scale = std_history.scale[0] / history.scale[0];
    let (n, m, q) = (cfg.num_samples, model_cfg.obs_dim, model_cfg.latent_dim);

    let paths: Result<Vec<PathOutput>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut noise =
                NoiseSource::Stream(substream(cfg.seed, &[STREAM_FORECAST, j as u64]));
            run_path(
                model_cfg,
                params,
                &std_history,
                future_covariates,
                p,
                cfg.lambda_mode,
                intervention,
                &mut noise,
            )
        })
        .collect();
    let paths = paths?;

    let mut samples = Vec::with_capacity(n * p * m);
    let mut latents = Vec::with_capacity(n * p * q);
    let mut scales = Vec::with_capacity(n * p * q);
    for path in &paths {
        samples.extend(path.y.iter().map(|v| v * scale));
        latents.extend_from_slice(&path.z);
        scales.extend_from_slice(&path.scales);
    }
    let samples = Tensor::new(vec![n, p, m], samples)?;
    let quantiles = quantile_bands(&samples, &cfg.quantiles);
    Ok(ForecastResult {
        samples,
        latent_samples: Tensor::new(vec![n, p, q], latents)?,
        shrink_scales: Tensor::new(vec![n, p, q], scales)?,
        quantiles,
        scale,
    })
}

fn quantile_bands(samples: &Tensor, levels: &[f64]) -> Vec<(f64, Tensor)> {
    let (n, p, m) = (samples.shape()[0], samples.shape()[1], samples.shape()[2]);
    levels
        .iter()
        .map(|&level| {
            let mut band = vec![0.0; p * m];
            let mut buf = vec![0.0; n];
            for t in 0..p {
                for d in 0..m {
                    for (j, b) in buf.iter_mut().enumerate() {
                        *b = samples.data()[(j * p + t) * m + d];
                    }
                    band[t * m + d] = empirical_quantile(&mut buf, level);
                }
            }
            (level, Tensor::new(vec![p, m], band).expect("band shape"))
        })
        .collect()
}

/// Posterior latent sample paths over the conditioning range, `[n × T × Q]`.
pub fn latent_paths(
    model_cfg: &ModelConfig,
    params: &ParameterStore,
    history: &SeriesBatch,
    cfg: &ForecastConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if history.n_series() != 1 {
        return Err(Error::Data("latent_paths expects a single-series history".into()));
    }
    let std_history = standardize(history);
    let (n, q) = (cfg.num_samples, model_cfg.latent_dim);
    let len = history.lengths[0];
    let paths: Result<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut noise =
                NoiseSource::Stream(substream(cfg.seed, &[STREAM_FORECAST, j as u64]));
            latent_path_once(model_cfg, params, &std_history, &mut noise)
        })
        .collect();
    let mut data = Vec::with_capacity(n * len * q);
    for p in paths? {
        data.extend(p);
    }
    Tensor::new(vec![n, len, q], data)
}

pub(crate) fn latent_path_once(
    model_cfg: &ModelConfig,
    params: &ParameterStore,
    std_history: &SeriesBatch,
    noise: &mut NoiseSource,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let model = Model::bind(&tape, model_cfg, params, false)?;
    let mut rec = Vec::new();
    condition_path(&model, std_history, noise, Some(&mut rec))?;
    Ok(rec)
}

/// Rolling-origin forecast: forecasts `window` steps, appends the *true*
/// observations for those steps to the history, and repeats until
/// `horizon_total` is covered (the last window may be shorter). `series`
/// holds history and test range together; the final `horizon_total` steps
/// are the test range.
pub fn rolling_forecast(
    model_cfg: &ModelConfig,
    params: &ParameterStore,
    series: &SeriesBatch,
    window: usize,
    horizon_total: usize,
    cfg: &ForecastConfig,
) -> Result<ForecastResult> {
    if window == 0 || window > horizon_total {
        return Err(Error::Config(format!(
            "rolling window {window} must be in 1..={horizon_total}"
        )));
    }
    if series.n_series() != 1 {
        return Err(Error::Data("rolling_forecast expects a single series".into()));
    }
    let len = series.lengths[0];
    if len <= horizon_total {
        return Err(Error::Data("series shorter than the test horizon".into()));
    }
    let origin = len - horizon_total;
    let (n, m, q) = (cfg.num_samples, model_cfg.obs_dim, model_cfg.latent_dim);

    let mut samples = vec![0.0; n * horizon_total * m];
    let mut latents = vec![0.0; n * horizon_total * q];
    let mut scales = vec![0.0; n * horizon_total * q];
    let mut done = 0usize;
    let mut k = 0u64;
    while done < horizon_total {
        let step = window.min(horizon_total - done);
        let history = series.slice_window(0, 0, origin + done)?;
        let mut cov = Vec::with_capacity(step * series.cov_dim());
        for t in 0..step {
            cov.extend_from_slice(series.u_row(0, origin + done + t));
        }
        let future_cov = Tensor::new(vec![step, series.cov_dim()], cov)?;
        let w_cfg = ForecastConfig {
            horizon: step,
            seed: if k == 0 {
                cfg.seed
            } else {
                use rand::RngCore;
                substream(cfg.seed, &[STREAM_FORECAST, 0xF0, k]).next_u64()
            },
            ..cfg.clone()
        };
        let result = forecast(model_cfg, params, &history, &future_cov, &w_cfg)?;
        for j in 0..n {
            for t in 0..step {
                for d in 0..m {
                    samples[(j * horizon_total + done + t) * m + d] =
                        result.samples.data()[(j * step + t) * m + d];
                }
                for d in 0..q {
                    latents[(j * horizon_total + done + t) * q + d] =
                        result.latent_samples.data()[(j * step + t) * q + d];
                    scales[(j * horizon_total + done + t) * q + d] =
                        result.shrink_scales.data()[(j * step + t) * q + d];
                }
            }
        }
        done += step;
        k += 1;
    }
    let samples = Tensor::new(vec![n, horizon_total, m], samples)?;
    let quantiles = quantile_bands(&samples, &cfg.quantiles);
    Ok(ForecastResult {
        samples,
        latent_samples: Tensor::new(vec![n, horizon_total, q], latents)?,
        shrink_scales: Tensor::new(vec![n, horizon_total, q], scales)?,
        quantiles,
        scale: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            obs_dim: 1,
            covariate_dim: 1,
            latent_dim: 2,
            rnn_hidden_dim: 4,
            rnn_layers: 1,
            head_hidden_dims: vec![4],
            ..ModelConfig::default()
        }
    }

    fn history(vals: &[f64], pad_to: usize) -> SeriesBatch {
        let t = pad_to.max(vals.len());
        let mut y = vec![0.0; t];
        y[..vals.len()].copy_from_slice(vals);
        let u: Vec<f64> = (0..t).map(|i| (i as f64 * 0.31).sin()).collect();
        SeriesBatch::new(
            Tensor::new(vec![1, t, 1], y).unwrap(),
            Tensor::new(vec![1, t, 1], u).unwrap(),
            vec![vals.len()],
            vec!["h".into()],
        )
        .unwrap()
    }

    fn future_cov(p: usize) -> Tensor {
        Tensor::new(vec![p, 1], (0..p).map(|t| (t as f64 * 0.31).cos()).collect()).unwrap()
    }

    #[test]
    fn degenerate_model_forecasts_zero_mean_with_decoder_sigma() {
        // all-zero parameters: decoder mean is 0, noise scale softplus(0)+floor
        let cfg = tiny_cfg();
        let mut store = init_params(&cfg, 0).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.set_value(&n, Tensor::zeros(&shape)).unwrap();
        }
        let hist = history(&[2.0, 2.0, 2.0], 3); // scale = 1 + 2 = 3
        let fc = ForecastConfig {
            horizon: 1,
            num_samples: 2000,
            seed: 4,
            ..ForecastConfig::default()
        };
        let result = forecast(&cfg, &store, &hist, &future_cov(1), &fc).unwrap();
        assert!((result.scale - 3.0).abs() < 1e-12);
        let vals: Vec<f64> = (0..2000).map(|j| result.samples.data()[j]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64)
            .sqrt();
        let expected_sd = (std::f64::consts::LN_2 + cfg.sigma_floor) * 3.0;
        assert!(mean.abs() < 0.05 * expected_sd * 3.0, "mean {mean}");
        assert!((sd - expected_sd).abs() / expected_sd < 0.1, "sd {sd} vs {expected_sd}");
    }

    #[test]
    fn same_seed_is_bit_identical_and_padding_is_ignored() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 1).unwrap();
        let fc = ForecastConfig {
            horizon: 3,
            num_samples: 8,
            seed: 9,
            ..ForecastConfig::default()
        };
        let a = forecast(&cfg, &store, &history(&[0.5, -0.2, 0.9], 3), &future_cov(3), &fc).unwrap();
        let b = forecast(&cfg, &store, &history(&[0.5, -0.2, 0.9], 3), &future_cov(3), &fc).unwrap();
        assert_eq!(
            a.samples.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.samples.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // a longer padded tensor with the same valid region forecasts identically
        let c = forecast(&cfg, &store, &history(&[0.5, -0.2, 0.9], 10), &future_cov(3), &fc).unwrap();
        assert_eq!(
            a.samples.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c.samples.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn covariate_shortfall_is_an_error() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 1).unwrap();
        let fc = ForecastConfig {
            horizon: 5,
            num_samples: 2,
            ..ForecastConfig::default()
        };
        let err = forecast(&cfg, &store, &history(&[1.0], 1), &future_cov(3), &fc).unwrap_err();
        assert!(err.to_string().contains("cover"), "{err}");
    }

    #[test]
    fn quantiles_are_monotone_and_floor_widens_bands() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 2).unwrap();
        let fc = ForecastConfig {
            horizon: 4,
            num_samples: 64,
            quantiles: vec![0.05, 0.25, 0.5, 0.75, 0.95],
            seed: 5,
            ..ForecastConfig::default()
        };
        let hist = history(&[0.4, 0.6, -0.3, 0.2, 0.8], 5);
        let result = forecast(&cfg, &store, &hist, &future_cov(4), &fc).unwrap();
        for t in 0..4 {
            for w in result.quantiles.windows(2) {
                assert!(w[0].1.at(t, 0) <= w[1].1.at(t, 0), "quantile crossing at t={t}");
            }
        }

        // a larger sigma floor widens every band
        let wide_cfg = ModelConfig {
            sigma_floor: 0.5,
            ..cfg.clone()
        };
        let wide = forecast(&wide_cfg, &store, &hist, &future_cov(4), &fc).unwrap();
        for t in 0..4 {
            let narrow_width = result.quantile(0.95).unwrap().at(t, 0)
                - result.quantile(0.05).unwrap().at(t, 0);
            let wide_width =
                wide.quantile(0.95).unwrap().at(t, 0) - wide.quantile(0.05).unwrap().at(t, 0);
            assert!(wide_width > narrow_width, "t={t}: {wide_width} vs {narrow_width}");
        }
    }

    #[test]
    fn frozen_noise_path_follows_posterior_medians() {
        // With ε ≡ 0 every log-normal collapses to exp(μ) (its median) and
        // the latent to μ_q · τ*λ, so the recorded path must match a manual
        // mean-path computation.
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 6).unwrap();
        let hist = standardize(&history(&[0.3, -0.5, 0.8], 3));
        let mut noise = NoiseSource::Zeros;
        let path = latent_path_once(&cfg, &store, &hist, &mut noise).unwrap();
        assert_eq!(path.len(), 3 * cfg.latent_dim);

        // manual replay on a fresh tape with explicit zero noise
        let tape = Tape::new();
        let model = Model::bind(&tape, &cfg, &store, false).unwrap();
        let pooled = tape.constant(Tensor::row(&hist.mean_y(0)));
        let zeros3 = tape.constant(Tensor::zeros(&[1, 3]));
        let (globals, _) = model.sample_globals(&pooled, &zeros3).unwrap();
        let mut state = model.initial_state(1);
        let mut manual = Vec::new();
        for t in 0..3 {
            let y_t = tape.constant(Tensor::row(hist.y_row(0, t)));
            let u_t = tape.constant(Tensor::row(hist.u_row(0, t)));
            let noise = StepNoise {
                local: tape.constant(Tensor::zeros(&[1, 2 * cfg.latent_dim])),
                z: tape.constant(Tensor::zeros(&[1, cfg.latent_dim])),
            };
            let (_, next) = model.step_elbo(&y_t, &u_t, &state, &globals, &noise).unwrap();
            manual.extend_from_slice(next.z.value().data());
            state = next;
        }
        for (a, b) in path.iter().zip(&manual) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn latent_paths_shape() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 7).unwrap();
        let hist = history(&[0.1, 0.2, 0.3, 0.4], 4);
        let fc = ForecastConfig {
            num_samples: 5,
            ..ForecastConfig::default()
        };
        let paths = latent_paths(&cfg, &store, &hist, &fc).unwrap();
        assert_eq!(paths.shape(), &[5, 4, cfg.latent_dim]);
    }

    #[test]
    fn rolling_single_window_equals_plain_forecast() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 8).unwrap();
        let series = history(&[0.4, 0.1, -0.2, 0.7, 0.5, 0.3, -0.1, 0.6], 8);
        let fc = ForecastConfig {
            horizon: 3,
            num_samples: 6,
            seed: 12,
            ..ForecastConfig::default()
        };
        let rolled = rolling_forecast(&cfg, &store, &series, 3, 3, &fc).unwrap();
        let hist = series.slice_window(0, 0, 5).unwrap();
        let mut cov = Vec::new();
        for t in 5..8 {
            cov.extend_from_slice(series.u_row(0, t));
        }
        let plain = forecast(
            &cfg,
            &store,
            &hist,
            &Tensor::new(vec![3, 1], cov).unwrap(),
            &fc,
        )
        .unwrap();
        for (a, b) in rolled.samples.iter().zip(plain.samples.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rolling_windows_cover_horizon_in_order() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 9).unwrap();
        let series = history(&[0.4, 0.1, -0.2, 0.7, 0.5, 0.3, -0.1, 0.6, 0.2, -0.4], 10);
        let fc = ForecastConfig {
            horizon: 6,
            num_samples: 4,
            seed: 13,
            ..ForecastConfig::default()
        };
        let rolled = rolling_forecast(&cfg, &store, &series, 2, 6, &fc).unwrap();
        assert_eq!(rolled.samples.shape(), &[4, 6, 1]);
        assert!(rolling_forecast(&cfg, &store, &series, 7, 6, &fc).is_err());
    }

    #[test]
    fn interventions_change_only_masked_coordinates() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 10).unwrap();
        let hist = history(&[0.5, -0.2, 0.9], 3);
        let fc = ForecastConfig {
            horizon: 2,
            num_samples: 3,
            seed: 14,
            ..ForecastConfig::default()
        };
        let plain = forecast(&cfg, &store, &hist, &future_cov(2), &fc).unwrap();
        let iv = RolloutIntervention {
            unit_scale: None,
            zero_latent: Some(vec![true, true, true, true]), // both dims, both steps
        };
        let zeroed =
            forecast_with_intervention(&cfg, &store, &hist, &future_cov(2), &fc, Some(&iv))
                .unwrap();
        assert!(zeroed.latent_samples.iter().all(|v| *v == 0.0));
        assert!(plain.latent_samples.iter().any(|v| *v != 0.0));

        let iv_unit = RolloutIntervention {
            unit_scale: Some(vec![true, true, true, true]),
            zero_latent: None,
        };
        let unit =
            forecast_with_intervention(&cfg, &store, &hist, &future_cov(2), &fc, Some(&iv_unit))
                .unwrap();
        assert!(unit.shrink_scales.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn empirical_quantile_basics() {
        let mut v = vec![3.0, 1.0, 2.0];
        assert_eq!(empirical_quantile(&mut v, 0.5), 2.0);
        let mut all_equal = vec![5.0; 10];
        assert_eq!(empirical_quantile(&mut all_equal, 0.05), 5.0);
        assert_eq!(empirical_quantile(&mut all_equal, 0.95), 5.0);
    }
}
