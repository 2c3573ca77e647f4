//! Forecast metrics, recovery scoring, latent alignment, baselines, and the
//! shrinkage/decoder ablation harnesses.

mod ablation;

pub use ablation::{ablate_decoder, ablate_shrinkage, AblationCurve, AblationMode, AblationReport};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::forecasting::{empirical_quantile, forecast, ForecastConfig, ForecastResult};
use crate::model::ModelConfig;
use crate::nn::ParameterStore;

/// Normalized deviation: `Σ|y − ŷ| / Σ|y|`, with `ŷ` the per-coordinate
/// median of the predicted samples.
pub fn nd(y_true: &Tensor, y_pred_median: &Tensor) -> Result<f64> {
    if y_true.shape() != y_pred_median.shape() {
        return Err(Error::ShapeMismatch {
            op: "nd",
            lhs: y_true.shape().to_vec(),
            rhs: y_pred_median.shape().to_vec(),
        });
    }
    let denom: f64 = y_true.iter().map(|v| v.abs()).sum();
    if denom == 0.0 {
        return Err(Error::domain("nd", "all-zero truth"));
    }
    let num: f64 = y_true
        .iter()
        .zip(y_pred_median.iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(num / denom)
}

/// Normalized RMSE: `√(mean squared error) / mean |y|`.
pub fn nrmse(y_true: &Tensor, y_pred_median: &Tensor) -> Result<f64> {
    if y_true.shape() != y_pred_median.shape() {
        return Err(Error::ShapeMismatch {
            op: "nrmse",
            lhs: y_true.shape().to_vec(),
            rhs: y_pred_median.shape().to_vec(),
        });
    }
    let n = y_true.numel() as f64;
    let denom: f64 = y_true.iter().map(|v| v.abs()).sum::<f64>() / n;
    if denom == 0.0 {
        return Err(Error::domain("nrmse", "all-zero truth"));
    }
    let mse: f64 = y_true
        .iter()
        .zip(y_pred_median.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(mse.sqrt() / denom)
}

/// Fraction of `(t, d)` coordinates whose true value falls inside the
/// empirical `[α/2, 1−α/2]` interval of the samples (closed interval).
/// Returns per-t rates and their mean. `true_paths` is `[T × D]`,
/// `sample_paths` `[n × T × D]`.
pub fn recovery_rate(
    true_paths: &Tensor,
    sample_paths: &Tensor,
    level: f64,
) -> Result<(Vec<f64>, f64)> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::domain("recovery_rate", format!("level {level} not in (0,1)")));
    }
    let (n, t_len, d) = (
        sample_paths.shape()[0],
        sample_paths.shape()[1],
        sample_paths.shape()[2],
    );
    if n < 2 {
        return Err(Error::domain("recovery_rate", "need at least 2 samples"));
    }
    if true_paths.shape() != [t_len, d] {
        return Err(Error::ShapeMismatch {
            op: "recovery_rate",
            lhs: true_paths.shape().to_vec(),
            rhs: vec![t_len, d],
        });
    }
    let alpha = 1.0 - level;
    let mut per_t = Vec::with_capacity(t_len);
    let mut buf = vec![0.0; n];
    let mut covered_total = 0usize;
    for t in 0..t_len {
        let mut covered = 0usize;
        for dim in 0..d {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = sample_paths.data()[(j * t_len + t) * d + dim];
            }
            let lo = empirical_quantile(&mut buf, alpha / 2.0);
            let hi = empirical_quantile(&mut buf, 1.0 - alpha / 2.0);
            let truth = true_paths.at(t, dim);
            if truth >= lo && truth <= hi {
                covered += 1;
            }
        }
        covered_total += covered;
        per_t.push(covered as f64 / d as f64);
    }
    Ok((per_t, covered_total as f64 / (t_len * d) as f64))
}

/// Least-squares map (with intercept) from sampled latent means to the true
/// latent space, fitted on the conditioning segment only.
#[derive(Debug, Clone)]
pub struct AlignmentMap {
    /// `[(Q+1) × D]`: Q latent weights plus an intercept row.
    pub weights: Tensor,
}

impl AlignmentMap {
    /// Applies the map to `[T × Q]` paths, yielding `[T × D]`.
    pub fn apply(&self, paths: &Tensor) -> Result<Tensor> {
        let (t_len, q) = (paths.shape()[0], paths.shape()[1]);
        let d = self.weights.shape()[1];
        if self.weights.shape()[0] != q + 1 {
            return Err(Error::ShapeMismatch {
                op: "AlignmentMap::apply",
                lhs: self.weights.shape().to_vec(),
                rhs: vec![q + 1, d],
            });
        }
        let mut out = vec![0.0; t_len * d];
        for t in 0..t_len {
            for j in 0..d {
                let mut acc = self.weights.at(q, j); // intercept
                for k in 0..q {
                    acc += paths.at(t, k) * self.weights.at(k, j);
                }
                out[t * d + j] = acc;
            }
        }
        Tensor::new(vec![t_len, d], out)
    }

    /// Applies the map to every path of `[n × T × Q]`, yielding `[n × T × D]`.
    pub fn apply_to_paths(&self, paths: &Tensor) -> Result<Tensor> {
        let (n, t_len, q) = (paths.shape()[0], paths.shape()[1], paths.shape()[2]);
        let d = self.weights.shape()[1];
        let mut out = Vec::with_capacity(n * t_len * d);
        for j in 0..n {
            let one = Tensor::new(
                vec![t_len, q],
                paths.data()[j * t_len * q..(j + 1) * t_len * q].to_vec(),
            )?;
            out.extend_from_slice(self.apply(&one)?.data());
        }
        Tensor::new(vec![n, t_len, d], out)
    }
}

/// Fits the alignment on the first `fit_len` steps and applies it to the
/// whole horizon. `true_paths` is `[T × D]`, `sample_mean_paths` `[T × Q]`
/// with `fit_len ≤ T`. Latent draws are identified only up to a linear map,
/// so recovery is scored after this projection. Directions collapsed by
/// shrinkage are dropped through a pseudo-inverse cutoff; a fully degenerate
/// design is an error.
pub fn align_latents(
    true_paths: &Tensor,
    sample_mean_paths: &Tensor,
    fit_len: usize,
) -> Result<(Tensor, AlignmentMap)> {
    let (t_len, d) = (true_paths.shape()[0], true_paths.shape()[1]);
    let q = sample_mean_paths.shape()[1];
    if sample_mean_paths.shape()[0] != t_len {
        return Err(Error::ShapeMismatch {
            op: "align_latents",
            lhs: true_paths.shape().to_vec(),
            rhs: sample_mean_paths.shape().to_vec(),
        });
    }
    if fit_len > t_len || fit_len < 2 * q {
        return Err(Error::domain(
            "align_latents",
            format!("fit segment {fit_len} must lie in [2Q={}, T={t_len}]", 2 * q),
        ));
    }
    let x = DMatrix::from_fn(fit_len, q + 1, |i, j| {
        if j < q {
            sample_mean_paths.at(i, j)
        } else {
            1.0
        }
    });
    let y = DMatrix::from_fn(fit_len, d, |i, j| true_paths.at(i, j));
    let svd = x.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax <= 1e-12 {
        return Err(Error::domain("align_latents", "rank-deficient fit (degenerate design)"));
    }
    let w = svd
        .solve(&y, smax * 1e-10)
        .map_err(|e| Error::domain("align_latents", e.to_string()))?;
    let weights = Tensor::new(
        vec![q + 1, d],
        (0..q + 1)
            .flat_map(|i| (0..d).map(move |j| (i, j)))
            .map(|(i, j)| w[(i, j)])
            .collect(),
    )?;
    let map = AlignmentMap { weights };
    let aligned = map.apply(sample_mean_paths)?;
    Ok((aligned, map))
}

/// Coefficient of determination of `pred` against `truth` (both `[T × D]`).
pub fn r_squared(truth: &Tensor, pred: &Tensor) -> Result<f64> {
    if truth.shape() != pred.shape() {
        return Err(Error::ShapeMismatch {
            op: "r_squared",
            lhs: truth.shape().to_vec(),
            rhs: pred.shape().to_vec(),
        });
    }
    let mean = truth.iter().sum::<f64>() / truth.numel() as f64;
    let ss_tot: f64 = truth.iter().map(|v| (v - mean) * (v - mean)).sum();
    let ss_res: f64 = truth
        .iter()
        .zip(pred.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    if ss_tot == 0.0 {
        return Err(Error::domain("r_squared", "constant truth"));
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Seasonal-naive predictions (`ŷ_{T+t} = y_{T+t−period}`) when the context
/// covers a period, otherwise last-value. `context` is `[T × M]`; returns
/// `[horizon × M]`.
pub fn persistence_baseline(context: &Tensor, horizon: usize, period: Option<usize>) -> Tensor {
    let (t_len, m) = (context.shape()[0], context.shape()[1]);
    let mut out = vec![0.0; horizon * m];
    let seasonal = period.filter(|p| *p >= 1 && t_len >= *p);
    for t in 0..horizon {
        for dim in 0..m {
            out[t * m + dim] = match seasonal {
                Some(p) => context.at(t_len - p + (t % p), dim),
                None => context.at(t_len - 1, dim),
            };
        }
    }
    Tensor::new(vec![horizon, m], out).expect("baseline shape")
}

/// One forecast evaluation unit: a raw history, the horizon covariates, and
/// the held-out truth.
#[derive(Debug, Clone)]
pub struct ForecastTask {
    pub history: SeriesBatch,
    /// `[p × N]`.
    pub future_covariates: Tensor,
    /// `[p × M]`, raw scale.
    pub truth: Tensor,
    pub id: String,
    /// True latent paths over history+horizon, `[T × D]`, when simulated.
    pub true_latents: Option<Tensor>,
}

/// Splits every series of a test batch at `context_len`: the head becomes
/// the conditioning history, the next `horizon` steps the truth.
pub fn forecast_tasks(batch: &SeriesBatch, context_len: usize, horizon: usize) -> Result<Vec<ForecastTask>> {
    let mut tasks = Vec::new();
    let (m, n) = (batch.obs_dim(), batch.cov_dim());
    for i in 0..batch.n_series() {
        if batch.lengths[i] < context_len + horizon {
            continue;
        }
        let history = batch.slice_window(i, 0, context_len)?;
        let mut truth = Vec::with_capacity(horizon * m);
        let mut cov = Vec::with_capacity(horizon * n);
        for t in context_len..context_len + horizon {
            truth.extend_from_slice(batch.y_row(i, t));
            cov.extend_from_slice(batch.u_row(i, t));
        }
        let true_latents = batch.latents.as_ref().map(|lat| {
            let d = lat.shape()[2];
            let t_max = batch.max_len();
            let mut data = Vec::with_capacity((context_len + horizon) * d);
            for t in 0..context_len + horizon {
                let start = (i * t_max + t) * d;
                data.extend_from_slice(&lat.data()[start..start + d]);
            }
            Tensor::new(vec![context_len + horizon, d], data).expect("latent slice")
        });
        tasks.push(ForecastTask {
            history,
            future_covariates: Tensor::new(vec![horizon, n], cov)?,
            truth: Tensor::new(vec![horizon, m], truth)?,
            id: batch.ids[i].clone(),
            true_latents,
        });
    }
    if tasks.is_empty() {
        return Err(Error::Data("no series long enough for evaluation".into()));
    }
    Ok(tasks)
}

/// Median of the Monte Carlo samples, `[p × M]`.
pub fn forecast_median(result: &ForecastResult) -> Tensor {
    let (n, p, m) = (
        result.samples.shape()[0],
        result.samples.shape()[1],
        result.samples.shape()[2],
    );
    let mut out = vec![0.0; p * m];
    let mut buf = vec![0.0; n];
    for t in 0..p {
        for d in 0..m {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = result.samples.data()[(j * p + t) * m + d];
            }
            out[t * m + d] = empirical_quantile(&mut buf, 0.5);
        }
    }
    Tensor::new(vec![p, m], out).expect("median shape")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerSeriesMetrics {
    pub id: String,
    pub nd: f64,
    pub nrmse: f64,
}

/// Panel-level metrics: the aggregate ratios over all series plus a
/// per-series breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub nd: f64,
    pub nrmse: f64,
    pub per_series: Vec<PerSeriesMetrics>,
    pub num_samples: usize,
}

impl MetricReport {
    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("serializable");
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from("series_id,nd,nrmse\n");
        for p in &self.per_series {
            out.push_str(&format!("{},{:.17e},{:.17e}\n", p.id, p.nd, p.nrmse));
        }
        out.push_str(&format!("__all__,{:.17e},{:.17e}\n", self.nd, self.nrmse));
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Aggregates metrics over (truth, median) pairs: the headline numbers use
/// pooled sums over every series and step, per the metric definitions.
pub fn metric_report(
    truths: &[Tensor],
    medians: &[Tensor],
    ids: &[String],
    num_samples: usize,
) -> Result<MetricReport> {
    if truths.len() != medians.len() || truths.is_empty() {
        return Err(Error::Data("metric_report needs matching nonempty inputs".into()));
    }
    let mut abs_err = 0.0;
    let mut abs_y = 0.0;
    let mut sq_err = 0.0;
    let mut count = 0usize;
    let mut per_series = Vec::with_capacity(truths.len());
    for ((truth, median), id) in truths.iter().zip(medians).zip(ids) {
        for (a, b) in truth.iter().zip(median.iter()) {
            abs_err += (a - b).abs();
            abs_y += a.abs();
            sq_err += (a - b) * (a - b);
            count += 1;
        }
        per_series.push(PerSeriesMetrics {
            id: id.clone(),
            nd: nd(truth, median).unwrap_or(f64::NAN),
            nrmse: nrmse(truth, median).unwrap_or(f64::NAN),
        });
    }
    if abs_y == 0.0 {
        return Err(Error::domain("metric_report", "all-zero truth"));
    }
    let n = count as f64;
    Ok(MetricReport {
        nd: abs_err / abs_y,
        nrmse: (sq_err / n).sqrt() / (abs_y / n),
        per_series,
        num_samples,
    })
}

/// Forecasts every task and reports panel metrics on the medians.
pub fn evaluate_model(
    model_cfg: &ModelConfig,
    params: &ParameterStore,
    tasks: &[ForecastTask],
    fcfg: &ForecastConfig,
) -> Result<(MetricReport, Vec<ForecastResult>)> {
    let mut results = Vec::with_capacity(tasks.len());
    let mut medians = Vec::with_capacity(tasks.len());
    let mut truths = Vec::with_capacity(tasks.len());
    let mut ids = Vec::with_capacity(tasks.len());
    for (i, task) in tasks.iter().enumerate() {
        let cfg = ForecastConfig {
            seed: task_seed(fcfg.seed, i),
            ..fcfg.clone()
        };
        let result = forecast(model_cfg, params, &task.history, &task.future_covariates, &cfg)?;
        medians.push(forecast_median(&result));
        truths.push(task.truth.clone());
        ids.push(task.id.clone());
        results.push(result);
    }
    let report = metric_report(&truths, &medians, &ids, fcfg.num_samples)?;
    Ok((report, results))
}

pub(crate) fn task_seed(seed: u64, task_index: usize) -> u64 {
    use rand::RngCore;
    crate::rng::substream(seed, &[crate::rng::STREAM_FORECAST, 0xEE, task_index as u64]).next_u64()
}

/// Metrics of the persistence baseline over the same tasks.
pub fn baseline_report(tasks: &[ForecastTask], period: Option<usize>) -> Result<MetricReport> {
    let mut medians = Vec::with_capacity(tasks.len());
    let mut truths = Vec::with_capacity(tasks.len());
    let mut ids = Vec::with_capacity(tasks.len());
    for task in tasks {
        let t_len = task.history.lengths[0];
        let m = task.history.obs_dim();
        let mut ctx = Vec::with_capacity(t_len * m);
        for t in 0..t_len {
            ctx.extend_from_slice(task.history.y_row(0, t));
        }
        let context = Tensor::new(vec![t_len, m], ctx)?;
        medians.push(persistence_baseline(&context, task.truth.shape()[0], period));
        truths.push(task.truth.clone());
        ids.push(task.id.clone());
    }
    metric_report(&truths, &medians, &ids, 1)
}

/// Band/plot CSV: `t,lower,median,upper,truth` per observation dim.
pub fn write_band_plot_csv(
    path: &std::path::Path,
    result: &ForecastResult,
    truth: &Tensor,
    lower: f64,
    upper: f64,
) -> Result<()> {
    let median = forecast_median(result);
    let lo = result
        .quantile(lower)
        .ok_or_else(|| Error::Config(format!("quantile {lower} not computed")))?;
    let hi = result
        .quantile(upper)
        .ok_or_else(|| Error::Config(format!("quantile {upper} not computed")))?;
    let mut out = String::from("t,lower,median,upper,truth\n");
    for t in 0..result.horizon() {
        out.push_str(&format!(
            "{t},{:.17e},{:.17e},{:.17e},{:.17e}\n",
            lo.at(t, 0),
            median.at(t, 0),
            hi.at(t, 0),
            truth.at(t, 0)
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}
