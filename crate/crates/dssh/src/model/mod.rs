//! The deep state-space model: generative pass, inference pass, and the
//! time-factorized ELBO.
//!
//! Per time step the generative process is
//!
//! ```text
//! h_t  = GRU(h_{t-1}, u_t, y_{t-1})                    (deterministic)
//! z*_t ~ N(μ_θ(h_t, z_{t-1}), σ_θ(h_t, z_{t-1}))
//! z_t  = z*_t · τ*_t · λ_t                             (non-centered)
//! y_t  ~ N(A·z_t, σ_y(z_t))                            (linear decoder)
//! ```
//!
//! with the shrinkage scales of [`crate::shrinkage`]. The inference network
//! mirrors it, conditioning additionally on `y_t`. Because posterior and
//! prior share the shrinkage scales, those scales cancel in the per-step
//! Normal KL, which is therefore evaluated on the unscaled `z*` heads; no
//! generative-model sampling happens during training.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::SeriesBatch;
use crate::distributions::NormalParams;
use crate::error::{Error, Result};
use crate::nn::{
    gru_step, init_gru, init_mlp, mlp_forward, GruConfig, MlpConfig, OutputHead, ParameterStore,
    TapeBinding,
};
use crate::rng::{standard_normals, substream, tag_from_str};
use crate::shrinkage::{
    prior_global_kl, prior_local_kl, regularized_tau_star_sq, sample_global_posterior,
    sample_local_posterior, GlobalShrinkageSample, LocalShrinkageSample, ShrinkageHyper,
};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_74;

/// Mean head of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    /// `mean = A·z + b`, constant over time. The interpretable default.
    #[default]
    Linear,
    /// Feed-forward mean head, kept for the decoder ablation.
    Mlp,
}

/// Dimensions and hyperparameters of one model instance. Serialized as JSON
/// next to every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Observation dimension M.
    pub obs_dim: usize,
    /// Covariate dimension N.
    pub covariate_dim: usize,
    /// Latent dimension Q.
    pub latent_dim: usize,
    pub rnn_hidden_dim: usize,
    pub rnn_layers: usize,
    /// Hidden widths shared by every feed-forward head.
    pub head_hidden_dims: Vec<usize>,
    pub shrinkage: ShrinkageHyper,
    /// Floor added to every softplus-produced standard deviation.
    pub sigma_floor: f64,
    #[serde(default)]
    pub decoder: DecoderKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            obs_dim: 1,
            covariate_dim: 1,
            latent_dim: 8,
            rnn_hidden_dim: 32,
            rnn_layers: 1,
            head_hidden_dims: vec![32, 32],
            shrinkage: ShrinkageHyper::default(),
            sigma_floor: 1e-4,
            decoder: DecoderKind::Linear,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, d) in [
            ("obs_dim", self.obs_dim),
            ("covariate_dim", self.covariate_dim),
            ("latent_dim", self.latent_dim),
            ("rnn_hidden_dim", self.rnn_hidden_dim),
            ("rnn_layers", self.rnn_layers),
        ] {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.head_hidden_dims.iter().any(|d| *d == 0) {
            return Err(Error::Config("head_hidden_dims must be >= 1".into()));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be > 0".into()));
        }
        self.shrinkage.validate()
    }

    pub fn gru_cfg(&self) -> GruConfig {
        GruConfig::new(
            self.covariate_dim + self.obs_dim,
            self.rnn_hidden_dim,
            self.rnn_layers,
        )
    }

    fn head(&self, input_dim: usize, output_dim: usize, head: OutputHead) -> MlpConfig {
        MlpConfig::new(input_dim, &self.head_hidden_dims, output_dim, head)
    }

    fn gen_z_cfg(&self, softplus: bool) -> MlpConfig {
        let head = if softplus { OutputHead::Softplus } else { OutputHead::Linear };
        self.head(self.rnn_hidden_dim + self.latent_dim, self.latent_dim, head)
    }

    fn inf_z_cfg(&self, softplus: bool) -> MlpConfig {
        let head = if softplus { OutputHead::Softplus } else { OutputHead::Linear };
        self.head(
            self.latent_dim + self.obs_dim + self.rnn_hidden_dim,
            self.latent_dim,
            head,
        )
    }

    fn local_head_cfg(&self) -> MlpConfig {
        self.head(
            self.latent_dim + self.rnn_hidden_dim,
            4 * self.latent_dim,
            OutputHead::Linear,
        )
    }

    fn global_head_cfg(&self) -> MlpConfig {
        self.head(self.obs_dim, 2, OutputHead::Linear)
    }

    fn dec_sigma_cfg(&self) -> MlpConfig {
        self.head(self.latent_dim, self.obs_dim, OutputHead::Softplus)
    }

    fn dec_mean_cfg(&self) -> MlpConfig {
        self.head(self.latent_dim, self.obs_dim, OutputHead::Linear)
    }
}

/// Fresh parameters for every network of the model, deterministic per seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let mut rng = substream(seed, &[crate::rng::STREAM_INIT]);
    init_gru(&mut store, "gru", &cfg.gru_cfg(), &mut rng)?;
    init_mlp(&mut store, "gen.z_mu", &cfg.gen_z_cfg(false), &mut rng)?;
    init_mlp(&mut store, "gen.z_sigma", &cfg.gen_z_cfg(true), &mut rng)?;
    init_mlp(&mut store, "inf.z_mu", &cfg.inf_z_cfg(false), &mut rng)?;
    init_mlp(&mut store, "inf.z_sigma", &cfg.inf_z_cfg(true), &mut rng)?;
    init_mlp(&mut store, "inf.local", &cfg.local_head_cfg(), &mut rng)?;
    init_mlp(&mut store, "inf.glob.alpha_tau", &cfg.global_head_cfg(), &mut rng)?;
    init_mlp(&mut store, "inf.glob.beta_tau", &cfg.global_head_cfg(), &mut rng)?;
    init_mlp(&mut store, "inf.glob.c", &cfg.global_head_cfg(), &mut rng)?;
    match cfg.decoder {
        DecoderKind::Linear => {
            let q = cfg.latent_dim;
            let bound = (1.0 / q as f64).sqrt();
            let data: Vec<f64> = (0..q * cfg.obs_dim)
                .map(|_| (rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0) * bound)
                .collect();
            store.insert("dec.a.weight", Tensor::new(vec![q, cfg.obs_dim], data)?)?;
            store.insert("dec.a.bias", Tensor::zeros(&[1, cfg.obs_dim]))?;
        }
        DecoderKind::Mlp => {
            init_mlp(&mut store, "dec.mean", &cfg.dec_mean_cfg(), &mut rng)?;
        }
    }
    init_mlp(&mut store, "dec.sigma", &cfg.dec_sigma_cfg(), &mut rng)?;
    Ok(store)
}

/// Per-step carried state: GRU layer states, the (scaled, sampled) latent,
/// and the previous observation. All zero at t = 0.
pub struct StepState<'t> {
    pub rnn: Vec<Var<'t>>,
    pub z: Var<'t>,
    pub y_prev: Var<'t>,
}

/// External noise consumed by one ELBO step.
pub struct StepNoise<'t> {
    /// `[batch × 2Q]` standard normals for the local shrinkage posteriors.
    pub local: Var<'t>,
    /// `[batch × Q]` standard normals for the latent draw.
    pub z: Var<'t>,
}

/// One step's loss pieces, each `[batch]`.
pub struct StepLoss<'t> {
    /// Expected log-likelihood term (higher is better).
    pub recon: Var<'t>,
    /// Normal‖Normal KL on the unscaled z* heads.
    pub kl_z: Var<'t>,
    /// Local shrinkage KL against the G×IG prior.
    pub kl_shrinkage: Var<'t>,
}

/// Where λ is drawn from during forecast rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaForecastMode {
    /// Inference posterior `q(λ | z_{t-1}, h_t)` (its inputs are available
    /// ahead of the observations).
    #[default]
    Posterior,
    /// The `G(0.5,1) × IG(0.5,1)` prior.
    Prior,
}

/// λ draw handed to a rollout step.
pub enum LocalDraw<'t> {
    /// Reparameterized from the inference head with `[batch × 2Q]` noise.
    Posterior { noise: Var<'t> },
    /// Pre-drawn `(α, β)` values, `[batch × 2Q]`, α block first.
    Prior { alpha_beta: Var<'t> },
}

/// `z = z* ⊙ √(τ*²) ⊙ √(λ²)` — the non-centered scale application.
pub fn assemble_z<'t>(
    z_star: &Var<'t>,
    tau_star_sq: &Var<'t>,
    lambda_sq: &Var<'t>,
) -> Result<Var<'t>> {
    let scale = tau_star_sq.sqrt()?.mul(&lambda_sq.sqrt()?)?;
    z_star.mul(&scale)
}

/// A model bound to one tape for one forward pass.
pub struct Model<'t> {
    cfg: ModelConfig,
    tape: &'t Tape,
    binding: TapeBinding<'t>,
}

impl<'t> Model<'t> {
    pub fn bind(
        tape: &'t Tape,
        cfg: &ModelConfig,
        store: &ParameterStore,
        trainable: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg: cfg.clone(),
            tape,
            binding: TapeBinding::load(tape, store, trainable),
        })
    }

    /// Binds with an explicit (possibly overridden) parameter binding.
    pub fn from_binding(tape: &'t Tape, cfg: &ModelConfig, binding: TapeBinding<'t>) -> Result<Self> {
        cfg.validate()?;
        Ok(Model {
            cfg: cfg.clone(),
            tape,
            binding,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// All-zero initial state (`h₀ = z₀ = y₀ = 0`).
    pub fn initial_state(&self, batch: usize) -> StepState<'t> {
        StepState {
            rnn: crate::nn::gru_zero_state(&self.cfg.gru_cfg(), self.tape, batch),
            z: self.tape.constant(Tensor::zeros(&[batch, self.cfg.latent_dim])),
            y_prev: self.tape.constant(Tensor::zeros(&[batch, self.cfg.obs_dim])),
        }
    }

    /// Advances the deterministic RNN state on `(u_t, y_{t-1})`.
    pub fn advance_rnn(&self, rnn: &[Var<'t>], u_t: &Var<'t>, y_prev: &Var<'t>) -> Result<Vec<Var<'t>>> {
        let x = Var::concat_cols(&[*u_t, *y_prev])?;
        gru_step(&self.cfg.gru_cfg(), "gru", &self.binding, rnn, &x)
    }

    fn sigma_from_head(&self, raw: Var<'t>) -> Var<'t> {
        // heads already apply softplus; only the floor is added here
        raw.add_scalar(self.cfg.sigma_floor)
    }

    /// Prior (generative) z* head: `N(μ_θ(h, z_prev), σ_θ(h, z_prev))`.
    pub fn generative_z_params(&self, h: &Var<'t>, z_prev: &Var<'t>) -> Result<NormalParams<'t>> {
        let x = Var::concat_cols(&[*h, *z_prev])?;
        let mu = mlp_forward(&self.cfg.gen_z_cfg(false), "gen.z_mu", &self.binding, &x)?;
        let sigma = mlp_forward(&self.cfg.gen_z_cfg(true), "gen.z_sigma", &self.binding, &x)?;
        NormalParams::new(mu, self.sigma_from_head(sigma))
    }

    /// Posterior z* head, conditioned additionally on `y_t`.
    pub fn inference_z_params(
        &self,
        z_prev: &Var<'t>,
        y_t: &Var<'t>,
        h: &Var<'t>,
    ) -> Result<NormalParams<'t>> {
        let x = Var::concat_cols(&[*z_prev, *y_t, *h])?;
        let mu = mlp_forward(&self.cfg.inf_z_cfg(false), "inf.z_mu", &self.binding, &x)?;
        let sigma = mlp_forward(&self.cfg.inf_z_cfg(true), "inf.z_sigma", &self.binding, &x)?;
        NormalParams::new(mu, self.sigma_from_head(sigma))
    }

    /// 4Q-wide local shrinkage posterior head over `(z_prev, h)`.
    pub fn local_head(&self, z_prev: &Var<'t>, h: &Var<'t>) -> Result<Var<'t>> {
        let x = Var::concat_cols(&[*z_prev, *h])?;
        mlp_forward(&self.cfg.local_head_cfg(), "inf.local", &self.binding, &x)
    }

    fn sample_local(
        &self,
        z_prev: &Var<'t>,
        h: &Var<'t>,
        noise: &Var<'t>,
    ) -> Result<LocalShrinkageSample<'t>> {
        let head = self.local_head(z_prev, h)?;
        sample_local_posterior(&head, noise)
    }

    /// Samples the global shrinkage posterior from the per-series time-mean
    /// of observed values, returning the sample and its prior KL `[batch]`.
    pub fn sample_globals(
        &self,
        pooled_y: &Var<'t>,
        noise: &Var<'t>,
    ) -> Result<(GlobalShrinkageSample<'t>, Var<'t>)> {
        let cfg = self.cfg.global_head_cfg();
        let a = mlp_forward(&cfg, "inf.glob.alpha_tau", &self.binding, pooled_y)?;
        let b = mlp_forward(&cfg, "inf.glob.beta_tau", &self.binding, pooled_y)?;
        let c = mlp_forward(&cfg, "inf.glob.c", &self.binding, pooled_y)?;
        let sample = sample_global_posterior(&a, &b, &c, noise)?;
        let kl = prior_global_kl(
            &sample.q_alpha_tau,
            &sample.q_beta_tau,
            &sample.q_c,
            &self.cfg.shrinkage,
        )?;
        Ok((sample, kl))
    }

    /// Decoder `p(y | z)`: linear (or MLP) mean with a softplus noise scale.
    pub fn decoder(&self, z: &Var<'t>) -> Result<NormalParams<'t>> {
        let mean = match self.cfg.decoder {
            DecoderKind::Linear => {
                let w = self.binding.var("dec.a.weight")?;
                let b = self.binding.var("dec.a.bias")?;
                let rows = z.shape()[0];
                z.matmul(&w)?.add(&b.broadcast_rows(rows)?)?
            }
            DecoderKind::Mlp => {
                mlp_forward(&self.cfg.dec_mean_cfg(), "dec.mean", &self.binding, z)?
            }
        };
        let sigma = mlp_forward(&self.cfg.dec_sigma_cfg(), "dec.sigma", &self.binding, z)?;
        NormalParams::new(mean, self.sigma_from_head(sigma))
    }

    /// `log N(y; μ, σ)` summed over the observation axis, `[batch]`.
    fn gaussian_loglik(&self, y: &Var<'t>, p: &NormalParams<'t>) -> Result<Var<'t>> {
        let z = y.sub(&p.mu)?.div(&p.sigma)?;
        let per_dim = z
            .square()
            .mul_scalar(0.5)
            .add(&p.sigma.log()?)?
            .add_scalar(HALF_LN_2PI)
            .neg();
        per_dim.sum_axis(1)
    }

    /// One ELBO step: advances the RNN, samples the local shrinkage and the
    /// latent from their posteriors, and returns the loss pieces with the new
    /// state. The Normal KL is evaluated on the unscaled z* heads (the
    /// shrinkage scales cancel); nothing is sampled from the generative side.
    pub fn step_elbo(
        &self,
        y_t: &Var<'t>,
        u_t: &Var<'t>,
        state: &StepState<'t>,
        globals: &GlobalShrinkageSample<'t>,
        noise: &StepNoise<'t>,
    ) -> Result<(StepLoss<'t>, StepState<'t>)> {
        let rnn = self.advance_rnn(&state.rnn, u_t, &state.y_prev)?;
        let h = *rnn.last().expect("at least one GRU layer");

        let local = self.sample_local(&state.z, &h, &noise.local)?;
        let tau_star_sq = regularized_tau_star_sq(&globals.tau_sq, &globals.c_sq, &local.lambda_sq)?;

        let p_star = self.generative_z_params(&h, &state.z)?;
        let q_star = self.inference_z_params(&state.z, y_t, &h)?;
        let kl_z = crate::distributions::kl_normal_normal(&q_star, &p_star)?;

        let z_star = crate::distributions::sample_normal_reparam(&q_star, &noise.z)?;
        let z = assemble_z(&z_star, &tau_star_sq, &local.lambda_sq)?;

        let y_params = self.decoder(&z)?;
        let recon = self.gaussian_loglik(y_t, &y_params)?;
        let kl_shrinkage = prior_local_kl(&local.q_alpha, &local.q_beta)?;

        Ok((
            StepLoss {
                recon,
                kl_z,
                kl_shrinkage,
            },
            StepState {
                rnn,
                z,
                y_prev: *y_t,
            },
        ))
    }

    /// One forecast rollout step: the latent comes from the generative heads,
    /// shrinkage from `local`, and the response is sampled from the decoder.
    /// Returns the new state, the sampled response, the latent, and the
    /// applied shrinkage scale `τ*λ` (useful for ablation bookkeeping).
    ///
    /// `unit_scale_mask` forces masked coordinates' shrinkage scale to 1;
    /// `zero_latent_mask` zeroes masked latent coordinates.
    #[allow(clippy::too_many_arguments)]
    pub fn rollout_step(
        &self,
        u_t: &Var<'t>,
        state: &StepState<'t>,
        globals: &GlobalShrinkageSample<'t>,
        local: &LocalDraw<'t>,
        z_noise: &Var<'t>,
        y_noise: &Var<'t>,
        unit_scale_mask: Option<&[bool]>,
        zero_latent_mask: Option<&[bool]>,
    ) -> Result<(StepState<'t>, Var<'t>, Var<'t>, Var<'t>)> {
        let q = self.cfg.latent_dim;
        let rnn = self.advance_rnn(&state.rnn, u_t, &state.y_prev)?;
        let h = *rnn.last().expect("at least one GRU layer");

        let lambda_sq = match local {
            LocalDraw::Posterior { noise } => self.sample_local(&state.z, &h, noise)?.lambda_sq,
            LocalDraw::Prior { alpha_beta } => {
                let alpha = alpha_beta.slice_cols(0, q)?;
                let beta = alpha_beta.slice_cols(q, 2 * q)?;
                alpha.mul(&beta)?
            }
        };
        let tau_star_sq = regularized_tau_star_sq(&globals.tau_sq, &globals.c_sq, &lambda_sq)?;
        let mut scale = tau_star_sq.sqrt()?.mul(&lambda_sq.sqrt()?)?;
        if let Some(mask) = unit_scale_mask {
            scale = masked_overwrite(self.tape, &scale, mask, 1.0)?;
        }

        let p_star = self.generative_z_params(&h, &state.z)?;
        let z_star = crate::distributions::sample_normal_reparam(&p_star, z_noise)?;
        let mut z = z_star.mul(&scale)?;
        if let Some(mask) = zero_latent_mask {
            z = masked_overwrite(self.tape, &z, mask, 0.0)?;
        }

        let y_params = self.decoder(&z)?;
        let y = crate::distributions::sample_normal_reparam(&y_params, y_noise)?;

        Ok((
            StepState {
                rnn,
                z,
                y_prev: y,
            },
            y,
            z,
            scale,
        ))
    }
}

/// Value-level overwrite of masked coordinates (no gradient flows through
/// the overwritten entries; rollout is evaluation-only).
fn masked_overwrite<'t>(
    tape: &'t Tape,
    v: &Var<'t>,
    mask: &[bool],
    value: f64,
) -> Result<Var<'t>> {
    let t = v.value();
    if mask.len() != t.numel() {
        return Err(Error::ShapeMismatch {
            op: "masked_overwrite",
            lhs: vec![mask.len()],
            rhs: t.shape().to_vec(),
        });
    }
    let keep: Vec<f64> = mask.iter().map(|m| if *m { 0.0 } else { 1.0 }).collect();
    let fill: Vec<f64> = mask.iter().map(|m| if *m { value } else { 0.0 }).collect();
    let keep = tape.constant(Tensor::new(t.shape().to_vec(), keep)?);
    let fill = tape.constant(Tensor::new(t.shape().to_vec(), fill)?);
    v.mul(&keep)?.add(&fill)
}

/// Batch-mean ELBO components (loss is the negative ELBO).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboReport {
    pub loss: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_shrinkage: f64,
    pub kl_global: f64,
}

/// Negative ELBO of one series on an existing model/tape. Noise is drawn from
/// `substream(base_seed, [series-id hash])`: global draws first, then per
/// step the 2Q local and Q latent normals. Reconstruction is summed over the
/// sequence (masked by length) and the global KL added once.
pub fn element_elbo<'t>(
    model: &Model<'t>,
    batch: &SeriesBatch,
    idx: usize,
    base_seed: u64,
) -> Result<(Var<'t>, ElboReport)> {
    let len = batch.lengths[idx];
    if len == 0 {
        return Err(Error::Data(format!("series {} is empty", batch.ids[idx])));
    }
    let q = model.cfg.latent_dim;
    let tape = model.tape;
    let mut rng = substream(base_seed, &[tag_from_str(&batch.ids[idx])]);

    let pooled = tape.constant(Tensor::row(&batch.mean_y(idx)));
    let g_noise = tape.constant(Tensor::row(&standard_normals(&mut rng, 3)));
    let (globals, kl_global) = model.sample_globals(&pooled, &g_noise)?;

    let mut state = model.initial_state(1);
    let mut neg_elbo = kl_global.sum();
    let mut report = ElboReport {
        kl_global: kl_global.value().data()[0],
        ..ElboReport::default()
    };
    for t in 0..len {
        let y_t = tape.constant(Tensor::row(batch.y_row(idx, t)));
        let u_t = tape.constant(Tensor::row(batch.u_row(idx, t)));
        let noise = StepNoise {
            local: tape.constant(Tensor::row(&standard_normals(&mut rng, 2 * q))),
            z: tape.constant(Tensor::row(&standard_normals(&mut rng, q))),
        };
        let (loss, next) = model.step_elbo(&y_t, &u_t, &state, &globals, &noise)?;
        let step_total = loss.kl_z.sub(&loss.recon)?.add(&loss.kl_shrinkage)?.sum();
        neg_elbo = neg_elbo.add(&step_total)?;
        report.recon += loss.recon.value().data()[0];
        report.kl_z += loss.kl_z.value().data()[0];
        report.kl_shrinkage += loss.kl_shrinkage.value().data()[0];
        state = next;
    }
    report.loss = neg_elbo.item();
    Ok((neg_elbo, report))
}

fn mean_reports(reports: &[ElboReport]) -> ElboReport {
    let n = reports.len() as f64;
    let mut out = ElboReport::default();
    for r in reports {
        out.loss += r.loss;
        out.recon += r.recon;
        out.kl_z += r.kl_z;
        out.kl_shrinkage += r.kl_shrinkage;
        out.kl_global += r.kl_global;
    }
    out.loss /= n;
    out.recon /= n;
    out.kl_z /= n;
    out.kl_shrinkage /= n;
    out.kl_global /= n;
    out
}

/// Mean negative ELBO over a batch (no gradients). Elements are evaluated
/// independently — each on its own tape with its own noise substream — and
/// reduced in batch order, so the result does not depend on thread count.
pub fn sequence_elbo(
    cfg: &ModelConfig,
    store: &ParameterStore,
    batch: &SeriesBatch,
    base_seed: u64,
) -> Result<ElboReport> {
    if batch.n_series() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let reports: Result<Vec<ElboReport>> = (0..batch.n_series())
        .into_par_iter()
        .map(|i| {
            let tape = Tape::new();
            let model = Model::bind(&tape, cfg, store, false)?;
            let (_, report) = element_elbo(&model, batch, i, base_seed)?;
            if !report.loss.is_finite() {
                return Err(Error::NonFinite {
                    at: "sequence_elbo",
                    detail: format!("series {}", batch.ids[i]),
                });
            }
            Ok(report)
        })
        .collect();
    Ok(mean_reports(&reports?))
}

/// Like [`sequence_elbo`] but also returns the gradient of the mean loss for
/// every parameter, in the store's sorted-name order.
pub fn sequence_elbo_grad(
    cfg: &ModelConfig,
    store: &ParameterStore,
    batch: &SeriesBatch,
    base_seed: u64,
) -> Result<(ElboReport, Vec<Vec<f64>>)> {
    if batch.n_series() == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let names: Vec<String> = store.names().map(String::from).collect();
    let b = batch.n_series();
    let per_element: Result<Vec<(ElboReport, Vec<Vec<f64>>)>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let tape = Tape::new();
            let model = Model::bind(&tape, cfg, store, true)?;
            let (loss, report) = element_elbo(&model, batch, i, base_seed)?;
            if !report.loss.is_finite() {
                return Err(Error::NonFinite {
                    at: "sequence_elbo_grad",
                    detail: format!("series {}", batch.ids[i]),
                });
            }
            tape.backward(loss)?;
            let grads: Result<Vec<Vec<f64>>> = names
                .iter()
                .map(|name| {
                    let var = model.binding.var(name)?;
                    Ok(match var.grad() {
                        Some(g) => g.data().to_vec(),
                        None => vec![0.0; var.numel()],
                    })
                })
                .collect();
            Ok((report, grads?))
        })
        .collect();
    let per_element = per_element?;

    // fixed-order reduction: element 0, 1, 2, ...
    let mut grads: Vec<Vec<f64>> = names
        .iter()
        .map(|n| vec![0.0; store.get(n).expect("known name").numel()])
        .collect();
    let mut reports = Vec::with_capacity(b);
    for (report, element_grads) in per_element {
        reports.push(report);
        for (acc, g) in grads.iter_mut().zip(element_grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
    let scale = 1.0 / b as f64;
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v *= scale;
        }
    }
    Ok((mean_reports(&reports), grads))
}

#[cfg(test)]
mod tests;
