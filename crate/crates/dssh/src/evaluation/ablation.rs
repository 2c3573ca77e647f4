//! Test-time ablations of the shrinkage machinery and the decoder.
//!
//! Both harnesses forecast the same tasks with and without an intervention
//! under common random numbers, and report the percent increase in ND at
//! each sparsity level.

use serde::{Deserialize, Serialize};

use super::{forecast_median, metric_report, task_seed, ForecastTask};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::forecasting::{
    empirical_quantile, forecast_with_intervention, ForecastConfig, ForecastResult,
    RolloutIntervention,
};
use crate::model::{DecoderKind, ModelConfig};
use crate::nn::ParameterStore;
use crate::rng::{substream, STREAM_ABLATE};

/// How shrinkage variables are knocked out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Ignore shrinkage at randomly chosen `(t, i)` coordinates (the scale
    /// `τ*λ` is forced to 1).
    RandomRemove,
    /// Zero the latent coordinates whose posterior-median shrinkage scale is
    /// lowest.
    ThresholdLowest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCurve {
    pub label: String,
    pub base_nd: f64,
    /// Percent ND increase per level, aligned with the report's `levels`.
    pub increase_pct: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    /// Sparsity levels, ascending.
    pub levels: Vec<f64>,
    pub curves: Vec<AblationCurve>,
}

impl AblationReport {
    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from("mode,level,increase_pct,base_nd\n");
        for curve in &self.curves {
            for (level, inc) in self.levels.iter().zip(&curve.increase_pct) {
                out.push_str(&format!(
                    "{},{level},{:.17e},{:.17e}\n",
                    curve.label, inc, curve.base_nd
                ));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

fn validate_levels(levels: &[f64]) -> Result<Vec<f64>> {
    if levels.is_empty() {
        return Err(Error::Config("ablation needs at least one level".into()));
    }
    if levels.iter().any(|l| !(0.0..1.0).contains(l)) {
        return Err(Error::Config("ablation levels must lie in [0, 1)".into()));
    }
    let mut sorted = levels.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite levels"));
    Ok(sorted)
}

/// Per-coordinate median over the sample axis of an `[n × p × Q]` tensor.
fn coordinate_medians(paths: &Tensor) -> Vec<f64> {
    let (n, p, q) = (paths.shape()[0], paths.shape()[1], paths.shape()[2]);
    let mut out = vec![0.0; p * q];
    let mut buf = vec![0.0; n];
    for t in 0..p {
        for i in 0..q {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = paths.data()[(j * p + t) * q + i];
            }
            out[t * q + i] = empirical_quantile(&mut buf, 0.5);
        }
    }
    out
}

/// Mask of the `k` coordinates with the smallest key values.
fn lowest_k_mask(keys: &[f64], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).expect("finite keys"));
    let mut mask = vec![false; keys.len()];
    for &idx in order.iter().take(k) {
        mask[idx] = true;
    }
    mask
}

/// `k` distinct random coordinates.
fn random_k_mask(len: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<bool> {
    use rand::Rng;
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..k.min(len) {
        let j = rng.random_range(i..len);
        idx.swap(i, j);
    }
    let mut mask = vec![false; len];
    for &i in idx.iter().take(k) {
        mask[i] = true;
    }
    mask
}

struct BaseRun {
    report_nd: f64,
    results: Vec<ForecastResult>,
}

fn base_run(
    model_cfg: &ModelConfig,
    params: &ParameterStore,
    tasks: &[ForecastTask],
    fcfg: &ForecastConfig,
) -> Result<BaseRun> {
    let mut results = Vec::with_capacity(tasks.len());
    let mut medians = Vec::with_capacity(tasks.len());
    let mut truths = Vec::with_capacity(tasks.len());
    let mut ids = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let cfg = ForecastConfig {
            seed: task_seed(fcfg.seed, i),
            ..fcfg.clone()
        };
        let result =
            forecast_with_intervention(model_cfg, params, &task.history, &task.future_covariates, &cfg, None)?;
        medians.push(forecast_median(&result));
        truths.push(task.truth.clone());
        ids.push(task.id.clone());
        results.push(result);
    }
    let report = metric_report(&truths, &medians, &ids, fcfg.num_samples)?;
    Ok(BaseRun {
        report_nd: report.nd,
        results,
    })
}

fn ablated_nd(
    model_cfg: &ModelConfig,
    params: &ParameterStore,
    tasks: &[ForecastTask],
    fcfg: &ForecastConfig,
    interventions: &[RolloutIntervention],
) -> Result<f64> {
    let mut medians = Vec::with_capacity(tasks.len());
    let mut truths = Vec::with_capacity(tasks.len());
    let mut ids = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let cfg = ForecastConfig {
            seed: task_seed(fcfg.seed, i),
            ..fcfg.clone()
        };
        let result = forecast_with_intervention(
            model_cfg,
            params,
            &task.history,
            &task.future_covariates,
            &cfg,
            Some(&interventions[i]),
        )?;
        medians.push(forecast_median(&result));
        truths.push(task.truth.clone());
        ids.push(task.id.clone());
    }
    Ok(metric_report(&truths, &medians, &ids, fcfg.num_samples)?.nd)
}

/// Shrinkage ablation: knocks out a fraction of shrinkage coordinates per
/// `mode` at each level and reports the percent ND increase against the
/// unablated forecasts.
pub fn ablate_shrinkage(
    model_cfg: &ModelConfig,
    params: &ParameterStore,
    tasks: &[ForecastTask],
    mode: AblationMode,
    levels: &[f64],
    fcfg: &ForecastConfig,
) -> Result<AblationReport> {
    let levels = validate_levels(levels)?;
    let base = base_run(model_cfg, params, tasks, fcfg)?;
    let q = model_cfg.latent_dim;
    let p = fcfg.horizon;
    let total = p * q;

    let mut increase_pct = Vec::with_capacity(levels.len());
    for (level_idx, &level) in levels.iter().enumerate() {
        let k = ((level * total as f64).round() as usize).min(total);
        let interventions: Vec<RolloutIntervention> = (0..tasks.len())
            .map(|i| {
                let mask = match mode {
                    AblationMode::RandomRemove => {
                        let mut rng = substream(
                            fcfg.seed,
                            &[STREAM_ABLATE, i as u64, level_idx as u64],
                        );
                        random_k_mask(total, k, &mut rng)
                    }
                    AblationMode::ThresholdLowest => {
                        let medians = coordinate_medians(&base.results[i].shrink_scales);
                        lowest_k_mask(&medians, k)
                    }
                };
                match mode {
                    AblationMode::RandomRemove => RolloutIntervention {
                        unit_scale: Some(mask),
                        zero_latent: None,
                    },
                    AblationMode::ThresholdLowest => RolloutIntervention {
                        unit_scale: None,
                        zero_latent: Some(mask),
                    },
                }
            })
            .collect();
        let nd = ablated_nd(model_cfg, params, tasks, fcfg, &interventions)?;
        increase_pct.push(100.0 * (nd - base.report_nd) / base.report_nd);
    }

    let label = match mode {
        AblationMode::RandomRemove => "random_remove",
        AblationMode::ThresholdLowest => "threshold_lowest",
    };
    Ok(AblationReport {
        levels,
        curves: vec![AblationCurve {
            label: label.into(),
            base_nd: base.report_nd,
            increase_pct,
        }],
    })
}

/// Decoder ablation: for a linear-decoder and an MLP-decoder model trained
/// on the same data, zeroes the latent coordinates with the lowest
/// posterior-median magnitude |z| and reports both error-increase curves.
pub fn ablate_decoder(
    linear: (&ModelConfig, &ParameterStore),
    nonlinear: (&ModelConfig, &ParameterStore),
    tasks: &[ForecastTask],
    levels: &[f64],
    fcfg: &ForecastConfig,
) -> Result<AblationReport> {
    let levels = validate_levels(levels)?;
    if linear.0.decoder != DecoderKind::Linear || nonlinear.0.decoder != DecoderKind::Mlp {
        return Err(Error::Config(
            "ablate_decoder expects a linear-decoder and an mlp-decoder model".into(),
        ));
    }
    if linear.0.latent_dim != nonlinear.0.latent_dim
        || linear.0.obs_dim != nonlinear.0.obs_dim
        || linear.0.covariate_dim != nonlinear.0.covariate_dim
    {
        return Err(Error::Config("decoder ablation models must share dimensions".into()));
    }

    let mut curves = Vec::with_capacity(2);
    for (label, (cfg, params)) in [("linear_decoder", linear), ("nonlinear_decoder", nonlinear)] {
        let base = base_run(cfg, params, tasks, fcfg)?;
        let total = fcfg.horizon * cfg.latent_dim;
        let mut increase_pct = Vec::with_capacity(levels.len());
        for &level in &levels {
            let k = ((level * total as f64).round() as usize).min(total);
            let interventions: Vec<RolloutIntervention> = (0..tasks.len())
                .map(|i| {
                    let magnitude: Vec<f64> = {
                        let abs = absolute_paths(&base.results[i].latent_samples);
                        coordinate_medians(&abs)
                    };
                    RolloutIntervention {
                        unit_scale: None,
                        zero_latent: Some(lowest_k_mask(&magnitude, k)),
                    }
                })
                .collect();
            let nd = ablated_nd(cfg, params, tasks, fcfg, &interventions)?;
            increase_pct.push(100.0 * (nd - base.report_nd) / base.report_nd);
        }
        curves.push(AblationCurve {
            label: label.into(),
            base_nd: base.report_nd,
            increase_pct,
        });
    }
    Ok(AblationReport { levels, curves })
}

fn absolute_paths(paths: &Tensor) -> Tensor {
    Tensor::new(
        paths.shape().to_vec(),
        paths.iter().map(|v| v.abs()).collect(),
    )
    .expect("same shape")
}
