//! Subcommand implementations.

use std::path::Path;

use dssh::data::{
    default_start, export_csv_panel, export_latents_csv, load_csv_panel, load_latents_csv,
    make_windows, simulate_linear_ssm, simulate_seasonal_panel, LinearSsmSpec, SeasonalPanelSpec,
    SeriesBatch,
};
use dssh::error::{Error, Result};
use dssh::evaluation::{
    ablate_decoder, ablate_shrinkage, baseline_report, evaluate_model, forecast_tasks,
    recovery_rate, AblationMode, AblationReport,
};
use dssh::forecasting::rolling_forecast;
use dssh::model::{DecoderKind, ModelConfig};
use dssh::nn::ParameterStore;
use dssh::training::{search_grid_draws, train};
use serde::Serialize;

use crate::config::RunConfig;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

pub fn cmd_simulate(
    cfg: &RunConfig,
    spec: &str,
    out: &Path,
    train_count: usize,
    test_count: usize,
    length: usize,
    series: usize,
    period: usize,
    eval_horizon: usize,
) -> Result<()> {
    ensure_dir(out)?;
    let seed = cfg.seed.unwrap_or(0);
    match spec {
        "linear_ssm" => {
            let spec = LinearSsmSpec::default();
            let (train, test) = simulate_linear_ssm(&spec, train_count, test_count, length, seed)?;
            export_csv_panel(&out.join("train.csv"), &train, 1, default_start())?;
            export_csv_panel(&out.join("test.csv"), &test, 1, default_start())?;
            export_latents_csv(&out.join("true_latents.csv"), &test)?;
        }
        "seasonal" => {
            let spec = SeasonalPanelSpec {
                n_series: series,
                len: length,
                period,
                seed,
                ..SeasonalPanelSpec::default()
            };
            let panel = simulate_seasonal_panel(&spec)?;
            if length <= eval_horizon {
                return Err(Error::Config("length must exceed eval horizon".into()));
            }
            // training range excludes the held-out tail; covariates are
            // hour-of-period one-hots, reconstructible from timestamps
            let indices: Vec<usize> = (0..panel.n_series()).collect();
            let mut train = panel.select(&indices)?;
            for len in train.lengths.iter_mut() {
                *len -= eval_horizon;
            }
            export_csv_panel(&out.join("train.csv"), &train, 0, default_start())?;
            export_csv_panel(&out.join("test.csv"), &panel, 0, default_start())?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown simulation spec '{other}' (expected linear_ssm or seasonal)"
            )))
        }
    }
    cfg.write_resolved(out)?;
    println!("simulate: wrote {}", out.display());
    Ok(())
}

fn load_panel(cfg: &RunConfig, data: &Path, name: &str) -> Result<SeriesBatch> {
    let path = data.join(name);
    load_csv_panel(&path, &cfg.data.covariates.to_spec())
}

#[derive(Serialize)]
struct SearchRecord {
    draw: dssh::training::SearchDraw,
    validation_loss: Option<f64>,
}

pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, search: usize) -> Result<()> {
    ensure_dir(out)?;
    let batch = load_panel(cfg, data, "train.csv")?;
    let (windows, skipped) = make_windows(
        &batch,
        cfg.data.context_len,
        cfg.data.horizon,
        cfg.data.stride,
    )?;
    if skipped > 0 {
        eprintln!("train: skipped {skipped} series shorter than context+horizon");
    }

    if search == 0 {
        let outcome = train(&cfg.model, &cfg.train, &batch, &windows, None, Some(out))?;
        outcome.params.save(&out.join("best.dssh"), Some(&outcome.opt_state))?;
        outcome.log.write_csv(&out.join("train_log.csv"))?;
        cfg.write_resolved(out)?;
        match outcome.best_validation {
            Some(loss) => println!("train: done, best validation loss {loss:.6}"),
            None => println!("train: done (no validation split)"),
        }
        return Ok(());
    }

    // random search over the desk-scaled grid
    let draws = search_grid_draws(search, cfg.train.seed);
    let mut records = Vec::with_capacity(draws.len());
    let mut best: Option<(f64, RunConfig, dssh::training::TrainOutcome)> = None;
    for (i, draw) in draws.iter().enumerate() {
        let mut candidate = cfg.clone();
        candidate.model.rnn_hidden_dim = draw.rnn_hidden_dim;
        candidate.model.latent_dim = draw.latent_dim;
        candidate.model.rnn_layers = draw.rnn_layers;
        candidate.train.learning_rate = draw.learning_rate;
        println!(
            "search {}/{search}: dim(h)={} Q={} layers={} lr={}",
            i + 1,
            draw.rnn_hidden_dim,
            draw.latent_dim,
            draw.rnn_layers,
            draw.learning_rate
        );
        let outcome = train(&candidate.model, &candidate.train, &batch, &windows, None, None)?;
        let val = outcome.best_validation;
        records.push(SearchRecord {
            draw: draw.clone(),
            validation_loss: val,
        });
        let improved = match (&best, val) {
            (None, Some(_)) => true,
            (Some((b, _, _)), Some(v)) => v < *b,
            _ => false,
        };
        if improved {
            best = Some((val.expect("checked"), candidate, outcome));
        }
    }
    let json = serde_json::to_string_pretty(&records).expect("serializable");
    std::fs::write(out.join("search_report.json"), json)
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    let Some((loss, winner_cfg, outcome)) = best else {
        return Err(Error::Data("random search produced no finished run".into()));
    };
    outcome.params.save(&out.join("best.dssh"), Some(&outcome.opt_state))?;
    outcome.log.write_csv(&out.join("train_log.csv"))?;
    winner_cfg.write_resolved(out)?;
    println!("train: search done, best validation loss {loss:.6}");
    Ok(())
}

/// Resolves a checkpoint argument: either a run directory (containing
/// `best.dssh` + `config.json`) or a `.dssh` file.
pub fn load_checkpoint(arg: &Path, fallback_model: &ModelConfig) -> Result<(ModelConfig, ParameterStore)> {
    let (ckpt_path, model_cfg) = if arg.is_dir() {
        let resolved = RunConfig::load_resolved(arg)?;
        (arg.join("best.dssh"), resolved.model)
    } else {
        (arg.to_path_buf(), fallback_model.clone())
    };
    let (params, _) = ParameterStore::load(&ckpt_path)?;
    Ok((model_cfg, params))
}

/// Evaluation split of a test panel: the last `horizon` steps of each series
/// are truth, everything before conditions the forecast.
fn tail_tasks(batch: &SeriesBatch, horizon: usize) -> Result<Vec<dssh::evaluation::ForecastTask>> {
    let min_len = batch
        .lengths
        .iter()
        .cloned()
        .min()
        .ok_or_else(|| Error::Data("empty test panel".into()))?;
    if min_len <= horizon {
        return Err(Error::Data(format!(
            "series of length {min_len} cannot hold a {horizon}-step evaluation horizon"
        )));
    }
    forecast_tasks(batch, min_len - horizon, horizon)
}

pub fn cmd_forecast(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    rolling_window: Option<usize>,
) -> Result<()> {
    ensure_dir(out)?;
    let (model_cfg, params) = load_checkpoint(checkpoint, &cfg.model)?;
    let batch = load_panel(cfg, data, "test.csv")?;
    let horizon = cfg.forecast.horizon;

    let mut bands = String::from("t,series_id,quantile,dim,value\n");
    let mut dump = ParameterStore::new();
    match rolling_window {
        None => {
            let tasks = tail_tasks(&batch, horizon)?;
            for (i, task) in tasks.iter().enumerate() {
                let fcfg = dssh::forecasting::ForecastConfig {
                    seed: dssh::rng::derive_seed(cfg.forecast.seed, &[0xF0CA57, i as u64]),
                    ..cfg.forecast.clone()
                };
                let result = dssh::forecasting::forecast(
                    &model_cfg,
                    &params,
                    &task.history,
                    &task.future_covariates,
                    &fcfg,
                )?;
                append_bands(&mut bands, &result, &task.id);
                dump.insert(format!("{}/samples", task.id), result.samples.clone())?;
            }
        }
        Some(window) => {
            for i in 0..batch.n_series() {
                let series = batch.select(&[i])?;
                let fcfg = dssh::forecasting::ForecastConfig {
                    seed: dssh::rng::derive_seed(cfg.forecast.seed, &[0xF0CA57, i as u64]),
                    ..cfg.forecast.clone()
                };
                let result =
                    rolling_forecast(&model_cfg, &params, &series, window, horizon, &fcfg)?;
                append_bands(&mut bands, &result, &batch.ids[i]);
                dump.insert(format!("{}/samples", batch.ids[i]), result.samples.clone())?;
            }
        }
    }
    std::fs::write(out.join("bands.csv"), bands)
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    dump.save(&out.join("samples.dssh"), None)?;
    cfg.write_resolved(out)?;
    println!("forecast: wrote {}", out.display());
    Ok(())
}

fn append_bands(bands: &mut String, result: &dssh::forecasting::ForecastResult, id: &str) {
    for (level, band) in &result.quantiles {
        for t in 0..result.horizon() {
            for d in 0..result.obs_dim() {
                bands.push_str(&format!("{t},{id},{level},{d},{:.17e}\n", band.at(t, d)));
            }
        }
    }
}

#[derive(Serialize)]
struct EvalSummary {
    nd: f64,
    nrmse: f64,
    baseline_nd: Option<f64>,
    baseline_nrmse: Option<f64>,
    response_recovery_90: f64,
    latent_recovery_90: Option<f64>,
    num_series: usize,
    num_samples: usize,
}

pub fn cmd_evaluate(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let (model_cfg, params) = load_checkpoint(checkpoint, &cfg.model)?;
    let mut batch = load_panel(cfg, data, "test.csv")?;
    let latents_path = data.join("true_latents.csv");
    if latents_path.exists() {
        load_latents_csv(&latents_path, &mut batch)?;
    }
    let horizon = cfg.forecast.horizon;
    let tasks = tail_tasks(&batch, horizon)?;
    let (report, results) = evaluate_model(&model_cfg, &params, &tasks, &cfg.forecast)?;
    report.write_json(&out.join("metrics.json"))?;
    report.write_csv(&out.join("metrics.csv"))?;

    let baseline = baseline_report(&tasks, cfg.data.period).ok();

    // response recovery at the 90% level
    let mut resp_sum = 0.0;
    for (task, result) in tasks.iter().zip(&results) {
        let (_, rate) = recovery_rate(&task.truth, &result.samples, 0.9)?;
        resp_sum += rate;
    }
    let response_recovery = resp_sum / tasks.len() as f64;

    // aligned latent recovery when true latents are available
    let latent_recovery = latent_recovery_90(&model_cfg, &params, &tasks, &results, cfg)?;

    let summary = EvalSummary {
        nd: report.nd,
        nrmse: report.nrmse,
        baseline_nd: baseline.as_ref().map(|b| b.nd),
        baseline_nrmse: baseline.as_ref().map(|b| b.nrmse),
        response_recovery_90: response_recovery,
        latent_recovery_90: latent_recovery,
        num_series: tasks.len(),
        num_samples: cfg.forecast.num_samples,
    };
    let json = serde_json::to_string_pretty(&summary).expect("serializable");
    std::fs::write(out.join("summary.json"), json)
        .map_err(|e| Error::io(out.display().to_string(), e))?;

    // band/plot CSV for the first task
    if let (Some(task), Some(result)) = (tasks.first(), results.first()) {
        if result.quantile(0.05).is_some() && result.quantile(0.95).is_some() {
            dssh::evaluation::write_band_plot_csv(
                &out.join("bands_first_series.csv"),
                result,
                &task.truth,
                0.05,
                0.95,
            )?;
        }
    }
    cfg.write_resolved(out)?;
    println!(
        "evaluate: nd {:.4}, nrmse {:.4}, response recovery@90 {:.3}",
        report.nd, report.nrmse, response_recovery
    );
    Ok(())
}

/// Aligned latent recovery at the 90% level, averaged over tasks that carry
/// true latent paths.
pub fn latent_recovery_90(
    model_cfg: &ModelConfig,
    params: &ParameterStore,
    tasks: &[dssh::evaluation::ForecastTask],
    results: &[dssh::forecasting::ForecastResult],
    cfg: &RunConfig,
) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, (task, result)) in tasks.iter().zip(results).enumerate() {
        let Some(true_latents) = task.true_latents.as_ref() else {
            continue;
        };
        let context_len = task.history.lengths[0];
        let horizon = task.truth.shape()[0];
        let d = true_latents.shape()[1];
        // posterior latent means over the conditioning segment
        let fcfg = dssh::forecasting::ForecastConfig {
            seed: dssh::rng::derive_seed(cfg.forecast.seed, &[0xA116, i as u64]),
            ..cfg.forecast.clone()
        };
        let cond_paths =
            dssh::forecasting::latent_paths(model_cfg, params, &task.history, &fcfg)?;
        let (n, t_len, q) = (
            cond_paths.shape()[0],
            cond_paths.shape()[1],
            cond_paths.shape()[2],
        );
        let mut means = vec![0.0; t_len * q];
        for j in 0..n {
            for t in 0..t_len {
                for k in 0..q {
                    means[t * q + k] += cond_paths.data()[(j * t_len + t) * q + k] / n as f64;
                }
            }
        }
        let mean_paths = dssh::Tensor::new(vec![t_len, q], means)?;
        let true_cond = dssh::Tensor::new(
            vec![context_len, d],
            true_latents.data()[..context_len * d].to_vec(),
        )?;
        let (_, map) = dssh::evaluation::align_latents(&true_cond, &mean_paths, context_len)?;
        let aligned_forecast = map.apply_to_paths(&result.latent_samples)?;
        let true_horizon = dssh::Tensor::new(
            vec![horizon, d],
            true_latents.data()[context_len * d..(context_len + horizon) * d].to_vec(),
        )?;
        let (_, rate) = recovery_rate(&true_horizon, &aligned_forecast, 0.9)?;
        sum += rate;
        count += 1;
    }
    Ok((count > 0).then(|| sum / count as f64))
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    data: &Path,
    checkpoint: &Path,
    checkpoint_nonlinear: Option<&Path>,
    mode: &str,
    levels: &[f64],
    out: &Path,
) -> Result<()> {
    ensure_dir(out)?;
    let (model_cfg, params) = load_checkpoint(checkpoint, &cfg.model)?;
    let mut batch = load_panel(cfg, data, "test.csv")?;
    let latents_path = data.join("true_latents.csv");
    if latents_path.exists() {
        load_latents_csv(&latents_path, &mut batch)?;
    }
    let tasks = tail_tasks(&batch, cfg.forecast.horizon)?;

    let report: AblationReport = match mode {
        "shrinkage" => {
            let random = ablate_shrinkage(
                &model_cfg,
                &params,
                &tasks,
                AblationMode::RandomRemove,
                levels,
                &cfg.forecast,
            )?;
            let threshold = ablate_shrinkage(
                &model_cfg,
                &params,
                &tasks,
                AblationMode::ThresholdLowest,
                levels,
                &cfg.forecast,
            )?;
            AblationReport {
                levels: random.levels.clone(),
                curves: random
                    .curves
                    .into_iter()
                    .chain(threshold.curves)
                    .collect(),
            }
        }
        "decoder" => {
            let nl_path = checkpoint_nonlinear.ok_or_else(|| {
                Error::Config("--checkpoint-nonlinear is required for decoder ablation".into())
            })?;
            let mlp_fallback = ModelConfig {
                decoder: DecoderKind::Mlp,
                ..cfg.model.clone()
            };
            let (nl_cfg, nl_params) = load_checkpoint(nl_path, &mlp_fallback)?;
            ablate_decoder(
                (&model_cfg, &params),
                (&nl_cfg, &nl_params),
                &tasks,
                levels,
                &cfg.forecast,
            )?
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation mode '{other}' (expected shrinkage or decoder)"
            )))
        }
    };
    report.write_json(&out.join("ablation.json"))?;
    report.write_csv(&out.join("ablation.csv"))?;
    cfg.write_resolved(out)?;
    for curve in &report.curves {
        println!(
            "ablate[{}]: base nd {:.4}, increases {:?}",
            curve.label, curve.base_nd, curve.increase_pct
        );
    }
    Ok(())
}

pub fn cmd_gradcheck() -> Result<()> {
    let results = dssh::diagnostics::run_gradient_suite()?;
    let mut failed = 0usize;
    for r in &results {
        println!(
            "{:<44} {:>12.3e}  {}",
            r.name,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        );
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::NonFinite {
            at: "gradcheck",
            detail: format!("{failed} checks failed"),
        });
    }
    println!("gradcheck: {} checks passed", results.len());
    Ok(())
}

pub fn parse_levels(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad ablation level '{p}'")))
        })
        .collect()
}

