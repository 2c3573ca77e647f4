//! Stochastic gradient variational Bayes training.
//!
//! Each step samples a minibatch of windows (weighted by response
//! magnitude), standardizes them, evaluates the batch-mean negative ELBO
//! with gradients, optionally clips, and applies Adam. All randomness comes
//! from substreams of the config seed, and gradients are reduced in a fixed
//! order, so a run is reproducible regardless of thread count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SeriesBatch, Window};
use crate::error::{Error, Result};
use crate::model::{init_params, sequence_elbo, sequence_elbo_grad, ModelConfig};
use crate::nn::{adam_step, AdamState, ParameterStore};
use crate::rng::{substream, STREAM_SAMPLER, STREAM_TRAIN, STREAM_VALIDATE};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub num_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Validation (and checkpoint emission) cadence, in steps.
    pub checkpoint_every: usize,
    /// Global L2 clip on the gradient; `null` disables clipping.
    pub grad_clip_norm: Option<f64>,
    /// Fraction of windows held out for validation.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            num_steps: 1000,
            learning_rate: 1e-3,
            seed: 0,
            checkpoint_every: 200,
            grad_clip_norm: Some(10.0),
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One optimizer step's record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub loss: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_shrink: f64,
    pub kl_global: f64,
    pub wall_ms: f64,
}

/// Step records plus the validation trace.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    /// (step, validation loss) pairs.
    pub validation: Vec<(u64, f64)>,
}

impl TrainLog {
    /// Appends the log as CSV (`step,loss,recon,kl_z,kl_shrink,kl_global,wall_ms`).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,loss,recon,kl_z,kl_shrink,kl_global,wall_ms\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.3}\n",
                r.step, r.loss, r.recon, r.kl_z, r.kl_shrink, r.kl_global, r.wall_ms
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Everything a finished run hands back.
pub struct TrainOutcome {
    /// Best-validation parameters (final parameters when no validation set).
    pub params: ParameterStore,
    pub opt_state: AdamState,
    pub log: TrainLog,
    pub best_validation: Option<f64>,
}

/// Divides `y` by the per-series factor `1 + mean(|y|)` over valid steps,
/// recording the factor so forecasts can be mapped back.
pub fn standardize(batch: &SeriesBatch) -> SeriesBatch {
    let mut out = batch.clone();
    let t = out.max_len();
    let m = out.obs_dim();
    for i in 0..out.n_series() {
        let scale = 1.0 + batch.mean_abs_y(i);
        for step in 0..out.lengths[i] {
            for j in 0..m {
                out.y.data_mut()[(i * t + step) * m + j] /= scale;
            }
        }
        out.scale[i] = batch.scale[i] * scale;
    }
    out
}

/// Inverse of [`standardize`] (restores `scale` to the input's).
pub fn de_standardize(batch: &SeriesBatch, original_scale: &[f64]) -> SeriesBatch {
    let mut out = batch.clone();
    let t = out.max_len();
    let m = out.obs_dim();
    for i in 0..out.n_series() {
        let factor = batch.scale[i] / original_scale[i];
        for step in 0..out.lengths[i] {
            for j in 0..m {
                out.y.data_mut()[(i * t + step) * m + j] *= factor;
            }
        }
        out.scale[i] = original_scale[i];
    }
    out
}

/// Infinite index stream over windows, each drawn with probability
/// proportional to its weight (uniform when every weight is zero).
pub struct WeightedSampler {
    cumulative: Vec<f64>,
    rng: ChaCha8Rng,
}

impl WeightedSampler {
    pub fn new(weights: &[f64], rng: ChaCha8Rng) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("sampler needs at least one window".into()));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("sampler weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        let uniform = total == 0.0;
        let mut cumulative = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in weights {
            acc += if uniform { 1.0 } else { *w };
            cumulative.push(acc);
        }
        Ok(WeightedSampler { cumulative, rng })
    }

    /// Sampler over windows weighted by `1 + mean|y|`.
    pub fn over_windows(batch: &SeriesBatch, windows: &[Window], rng: ChaCha8Rng) -> Result<Self> {
        let weights: Vec<f64> = windows
            .iter()
            .map(|w| 1.0 + window_mean_abs(batch, w))
            .collect();
        WeightedSampler::new(&weights, rng)
    }

    pub fn next_index(&mut self) -> usize {
        let total = *self.cumulative.last().expect("nonempty");
        let x = self.rng.random::<f64>() * total;
        self.cumulative.partition_point(|c| *c <= x).min(self.cumulative.len() - 1)
    }
}

impl Iterator for WeightedSampler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        Some(self.next_index())
    }
}

fn window_mean_abs(batch: &SeriesBatch, w: &Window) -> f64 {
    let mut sum = 0.0;
    let m = batch.obs_dim();
    for t in w.origin..w.origin + w.total_len() {
        for v in batch.y_row(w.series, t) {
            sum += v.abs();
        }
    }
    sum / (w.total_len() * m) as f64
}

/// Materializes windows into a standardized batch-of-one-per-window.
pub fn materialize_windows(batch: &SeriesBatch, windows: &[Window]) -> Result<SeriesBatch> {
    let slices: Result<Vec<SeriesBatch>> = windows
        .iter()
        .map(|w| batch.slice_window(w.series, w.origin, w.total_len()))
        .collect();
    let slices = slices?;
    let refs: Vec<&SeriesBatch> = slices.iter().collect();
    Ok(standardize(&SeriesBatch::concat(&refs)?))
}

/// Mean validation loss under a fixed noise stream; parameters untouched.
pub fn validate(
    model_cfg: &ModelConfig,
    params: &ParameterStore,
    val: &SeriesBatch,
    seed: u64,
) -> Result<f64> {
    let base = seed_for_validation(seed);
    Ok(sequence_elbo(model_cfg, params, val, base)?.loss)
}

fn seed_for_validation(seed: u64) -> u64 {
    use rand::RngCore;
    substream(seed, &[STREAM_VALIDATE]).next_u64()
}

/// Scales all gradients so the global L2 norm is at most `clip`; pure
/// rescaling, so the gradient direction is untouched.
pub fn clip_gradients(store: &mut ParameterStore, clip: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > clip && norm > 0.0 {
        store.scale_grads(clip / norm);
    }
    norm
}

/// Runs the SGVB loop. `windows` index into `data`; a deterministic
/// `validation_fraction` split is held out and the best-validation
/// parameters are returned. When `checkpoint_dir` is given, `checkpoint.dssh`
/// (latest) and `best.dssh` (best validation) are written at every
/// validation point.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &SeriesBatch,
    windows: &[Window],
    initial: Option<ParameterStore>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }

    // deterministic train/validation split
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut split_rng = substream(train_cfg.seed, &[STREAM_SAMPLER, 0]);
    shuffle(&mut order, &mut split_rng);
    let val_count = ((windows.len() as f64) * train_cfg.validation_fraction).floor() as usize;
    let (val_idx, train_idx) = order.split_at(val_count);
    let train_windows: Vec<Window> = train_idx.iter().map(|&i| windows[i]).collect();
    let val_windows: Vec<Window> = val_idx.iter().map(|&i| windows[i]).collect();
    if train_windows.is_empty() {
        return Err(Error::Data("validation split left no training windows".into()));
    }
    let val_batch = if val_windows.is_empty() {
        None
    } else {
        Some(materialize_windows(data, &val_windows)?)
    };

    let mut params = match initial {
        Some(p) => p,
        None => init_params(model_cfg, train_cfg.seed)?,
    };
    let mut opt = AdamState::new(&params);
    let mut sampler = WeightedSampler::over_windows(
        data,
        &train_windows,
        substream(train_cfg.seed, &[STREAM_SAMPLER, 1]),
    )?;

    let mut log = TrainLog::default();
    let mut best: Option<(f64, ParameterStore)> = None;
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut consecutive_failures = 0usize;

    let run_validation = |step: u64,
                              params: &ParameterStore,
                              opt: &AdamState,
                              log: &mut TrainLog,
                              best: &mut Option<(f64, ParameterStore)>|
     -> Result<()> {
        let Some(val) = val_batch.as_ref() else {
            return Ok(());
        };
        let loss = validate(model_cfg, params, val, train_cfg.seed)?;
        log.validation.push((step, loss));
        let improved = best.as_ref().map_or(true, |(b, _)| loss < *b);
        if improved {
            *best = Some((loss, params.clone_values()));
        }
        if let Some(dir) = checkpoint_dir {
            params.save(&dir.join("checkpoint.dssh"), Some(opt))?;
            if improved {
                params.save(&dir.join("best.dssh"), Some(opt))?;
            }
        }
        Ok(())
    };

    run_validation(0, &params, &opt, &mut log, &mut best)?;

    for step in 1..=train_cfg.num_steps as u64 {
        let started = Instant::now();
        let picked: Vec<Window> = (0..train_cfg.batch_size)
            .map(|_| train_windows[sampler.next_index()])
            .collect();
        let batch = materialize_windows(data, &picked)?;
        let step_seed = seed_for_step(train_cfg.seed, step);
        match sequence_elbo_grad(model_cfg, &params, &batch, step_seed) {
            Ok((report, grads)) => {
                consecutive_failures = 0;
                for (name, g) in names.iter().zip(&grads) {
                    params.accumulate_grad(name, g)?;
                }
                if let Some(clip) = train_cfg.grad_clip_norm {
                    clip_gradients(&mut params, clip);
                }
                adam_step(&mut params, &mut opt, train_cfg.learning_rate)?;
                log.records.push(TrainRecord {
                    step,
                    loss: report.loss,
                    recon: report.recon,
                    kl_z: report.kl_z,
                    kl_shrink: report.kl_shrinkage,
                    kl_global: report.kl_global,
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                });
            }
            Err(Error::NonFinite { .. }) => {
                consecutive_failures += 1;
                params.clear_grads();
                log.records.push(TrainRecord {
                    step,
                    loss: f64::NAN,
                    recon: f64::NAN,
                    kl_z: f64::NAN,
                    kl_shrink: f64::NAN,
                    kl_global: f64::NAN,
                    wall_ms: started.elapsed().as_secs_f64() * 1e3,
                });
                if consecutive_failures >= 10 {
                    return Err(Error::NonFinite {
                        at: "train",
                        detail: format!("10 consecutive non-finite losses ending at step {step}"),
                    });
                }
            }
            Err(e) => return Err(e),
        }
        if step % train_cfg.checkpoint_every as u64 == 0 || step == train_cfg.num_steps as u64 {
            run_validation(step, &params, &opt, &mut log, &mut best)?;
        }
    }

    let (best_validation, final_params) = match best {
        Some((loss, p)) => (Some(loss), p),
        None => (None, params),
    };
    Ok(TrainOutcome {
        params: final_params,
        opt_state: opt,
        log,
        best_validation,
    })
}

fn seed_for_step(seed: u64, step: u64) -> u64 {
    use rand::RngCore;
    substream(seed, &[STREAM_TRAIN, step]).next_u64()
}

fn shuffle(xs: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.random_range(0..=i);
        xs.swap(i, j);
    }
}

/// Hyperparameter draw for random search (desk-scaled version of the tuned
/// grid: RNN width, latent width, RNN depth, learning rate).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchDraw {
    pub rnn_hidden_dim: usize,
    pub latent_dim: usize,
    pub rnn_layers: usize,
    pub learning_rate: f64,
}

/// Draws `n` configurations from the search grid, deterministic per seed.
pub fn search_grid_draws(n: usize, seed: u64) -> Vec<SearchDraw> {
    const HIDDEN: [usize; 4] = [16, 32, 48, 64];
    const LATENT: [usize; 4] = [4, 8, 12, 16];
    const LAYERS: [usize; 3] = [1, 2, 3];
    const LR: [f64; 2] = [1e-3, 1e-4];
    let mut rng = substream(seed, &[STREAM_SAMPLER, 2]);
    (0..n)
        .map(|_| SearchDraw {
            rnn_hidden_dim: HIDDEN[rng.random_range(0..HIDDEN.len())],
            latent_dim: LATENT[rng.random_range(0..LATENT.len())],
            rnn_layers: LAYERS[rng.random_range(0..LAYERS.len())],
            learning_rate: LR[rng.random_range(0..LR.len())],
        })
        .collect()
}

/// Resolved output layout of a training run.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("best.dssh")
}
