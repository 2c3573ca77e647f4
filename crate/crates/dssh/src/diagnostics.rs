//! The finite-difference verification suite.
//!
//! Checks every tape operation, every network head, a full ELBO step, and a
//! multi-step sequence ELBO against central differences. Run from the CLI
//! (`dssh gradcheck`) or the acceptance tests.

use crate::autodiff::{grad_check, Tape, Tensor, Var};
use crate::data::SeriesBatch;
use crate::error::Result;
use crate::model::{element_elbo, init_params, Model, ModelConfig, StepNoise};
use crate::nn::{gru_step, gru_zero_state, mlp_forward, TapeBinding};
use crate::rng::{standard_normals, substream};

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const GRAD_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

fn record(results: &mut Vec<GradCheckResult>, name: impl Into<String>, err: f64) {
    results.push(GradCheckResult {
        name: name.into(),
        max_rel_err: err,
        passed: err < GRAD_TOLERANCE,
    });
}

type OpCase = (
    &'static str,
    bool, // requires positive inputs
    Box<dyn for<'a> Fn(&'a Tape, Var<'a>) -> Result<Var<'a>>>,
);

fn op_cases() -> Vec<OpCase> {
    vec![
        ("exp", false, Box::new(|_, v| Ok(v.exp().sum()))),
        ("log", true, Box::new(|_, v| v.log().map(|r| r.sum()))),
        ("sqrt", true, Box::new(|_, v| v.sqrt().map(|r| r.sum()))),
        ("square", false, Box::new(|_, v| Ok(v.square().sum()))),
        ("neg", false, Box::new(|_, v| Ok(v.neg().sum()))),
        ("tanh", false, Box::new(|_, v| Ok(v.tanh().sum()))),
        ("sigmoid", false, Box::new(|_, v| Ok(v.sigmoid().sum()))),
        ("softplus", false, Box::new(|_, v| Ok(v.softplus().sum()))),
        ("add_scalar", false, Box::new(|_, v| Ok(v.add_scalar(1.7).square().sum()))),
        ("mul_scalar", false, Box::new(|_, v| Ok(v.mul_scalar(-2.3).square().sum()))),
        ("clamp_max", false, Box::new(|_, v| Ok(v.clamp_max(0.4).sum()))),
        ("sum", false, Box::new(|_, v| Ok(v.sum()))),
        ("mean", false, Box::new(|_, v| Ok(v.mean()))),
        ("sum_axis0", false, Box::new(|_, v| v.sum_axis(0).map(|r| r.square().sum()))),
        ("sum_axis1", false, Box::new(|_, v| v.sum_axis(1).map(|r| r.square().sum()))),
        ("mean_axis0", false, Box::new(|_, v| v.mean_axis(0).map(|r| r.square().sum()))),
        ("mean_axis1", false, Box::new(|_, v| v.mean_axis(1).map(|r| r.square().sum()))),
        ("transpose", false, Box::new(|_, v| v.transpose().map(|r| r.square().sum()))),
        (
            "add",
            false,
            Box::new(|t, v| {
                let w = t.constant(Tensor::new(vec![2, 3], vec![0.3, -0.4, 1.2, 0.8, -1.1, 0.2]).unwrap());
                v.add(&w).map(|r| r.square().sum())
            }),
        ),
        (
            "sub",
            false,
            Box::new(|t, v| {
                let w = t.constant(Tensor::new(vec![2, 3], vec![0.3, -0.4, 1.2, 0.8, -1.1, 0.2]).unwrap());
                v.sub(&w).map(|r| r.square().sum())
            }),
        ),
        (
            "mul",
            false,
            Box::new(|t, v| {
                let w = t.constant(Tensor::new(vec![2, 3], vec![0.3, -0.4, 1.2, 0.8, -1.1, 0.2]).unwrap());
                v.mul(&w).map(|r| r.sum())
            }),
        ),
        (
            "div",
            false,
            Box::new(|t, v| {
                let w = t.constant(Tensor::new(vec![2, 3], vec![1.3, -0.9, 1.2, 0.8, -1.1, 2.0]).unwrap());
                v.div(&w).map(|r| r.sum())
            }),
        ),
        (
            "matmul",
            false,
            Box::new(|t, v| {
                let w = t.constant(Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.9, 1.4, -0.6, 0.3]).unwrap());
                v.matmul(&w).map(|r| r.square().sum())
            }),
        ),
        (
            "concat_slice",
            false,
            Box::new(|_, v| {
                let a = v.slice_cols(0, 2)?;
                let b = v.slice_cols(2, 3)?;
                Var::concat_cols(&[b, a]).map(|r| r.square().sum())
            }),
        ),
        (
            "broadcast_cols",
            false,
            Box::new(|_, v| {
                let col = v.slice_cols(0, 1)?;
                col.broadcast_cols(4).map(|r| r.square().sum())
            }),
        ),
        (
            "broadcast_rows",
            false,
            Box::new(|_, v| {
                // first row of the [2×3] input as [1×3]
                let row = v.transpose()?.slice_cols(0, 1)?.transpose()?;
                row.broadcast_rows(4).map(|x| x.square().sum())
            }),
        ),
    ]
}

/// Checks every tape op at `points` seeded random inputs.
pub fn check_ops(points: usize, results: &mut Vec<GradCheckResult>) {
    let mut rng = substream(0xD1FF, &[]);
    for (name, needs_positive, f) in op_cases() {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let raw = standard_normals(&mut rng, 6);
            let data: Vec<f64> = if needs_positive {
                raw.iter().map(|v| v.abs() + 0.5).collect()
            } else {
                raw
            };
            let x = Tensor::new(vec![2, 3], data).expect("2x3");
            let err = grad_check(f.as_ref(), &x, GRAD_EPS).expect("finite op");
            worst = worst.max(err);
        }
        record(results, format!("op::{name}"), worst);
    }
}

fn suite_cfg() -> ModelConfig {
    ModelConfig {
        obs_dim: 1,
        covariate_dim: 1,
        latent_dim: 2,
        rnn_hidden_dim: 4,
        rnn_layers: 2,
        head_hidden_dims: vec![6],
        ..ModelConfig::default()
    }
}

/// Checks every network head of a small model with respect to its first
/// weight matrix (and the GRU through three chained steps).
pub fn check_network_heads(results: &mut Vec<GradCheckResult>) -> Result<()> {
    let cfg = suite_cfg();
    let store = init_params(&cfg, 0xBEAD)?;
    let mlp_heads: Vec<(&str, crate::nn::MlpConfig, usize)> = vec![
        ("gen.z_mu", cfg_head(&cfg, "gen.z_mu"), cfg.rnn_hidden_dim + cfg.latent_dim),
        ("gen.z_sigma", cfg_head(&cfg, "gen.z_sigma"), cfg.rnn_hidden_dim + cfg.latent_dim),
        (
            "inf.z_mu",
            cfg_head(&cfg, "inf.z_mu"),
            cfg.latent_dim + cfg.obs_dim + cfg.rnn_hidden_dim,
        ),
        (
            "inf.z_sigma",
            cfg_head(&cfg, "inf.z_sigma"),
            cfg.latent_dim + cfg.obs_dim + cfg.rnn_hidden_dim,
        ),
        ("inf.local", cfg_head(&cfg, "inf.local"), cfg.latent_dim + cfg.rnn_hidden_dim),
        ("inf.glob.alpha_tau", cfg_head(&cfg, "inf.glob.alpha_tau"), cfg.obs_dim),
        ("inf.glob.beta_tau", cfg_head(&cfg, "inf.glob.beta_tau"), cfg.obs_dim),
        ("inf.glob.c", cfg_head(&cfg, "inf.glob.c"), cfg.obs_dim),
        ("dec.sigma", cfg_head(&cfg, "dec.sigma"), cfg.latent_dim),
    ];
    let mut rng = substream(0xF00D, &[]);
    for (prefix, head_cfg, input_dim) in mlp_heads {
        let probe = format!("{prefix}.layer0.weight");
        let x_in = Tensor::row(&standard_normals(&mut rng, input_dim));
        let x0 = store.expect(&probe)?.clone();
        let err = grad_check(
            |tape, v| {
                let binding = TapeBinding::load(tape, &store, false).with_override(&probe, v);
                let x = tape.constant(x_in.clone());
                mlp_forward(&head_cfg, prefix, &binding, &x).map(|y| y.square().sum())
            },
            &x0,
            GRAD_EPS,
        )?;
        record(results, format!("head::{prefix}"), err);
    }

    // linear decoder weight
    {
        let x0 = store.expect("dec.a.weight")?.clone();
        let z_in = Tensor::row(&standard_normals(&mut rng, cfg.latent_dim));
        let err = grad_check(
            |tape, v| {
                let binding = TapeBinding::load(tape, &store, false).with_override("dec.a.weight", v);
                let model = Model::from_binding(tape, &cfg, binding)?;
                let z = tape.constant(z_in.clone());
                let p = model.decoder(&z)?;
                p.mu.square().sum().add(&p.sigma.sum())
            },
            &x0,
            GRAD_EPS,
        )?;
        record(results, "head::dec.a", err);
    }

    // MLP decoder variant
    {
        let mlp_cfg = ModelConfig {
            decoder: crate::model::DecoderKind::Mlp,
            ..cfg.clone()
        };
        let mlp_store = init_params(&mlp_cfg, 0xBEAF)?;
        let x0 = mlp_store.expect("dec.mean.layer0.weight")?.clone();
        let z_in = Tensor::row(&standard_normals(&mut rng, cfg.latent_dim));
        let err = grad_check(
            |tape, v| {
                let binding = TapeBinding::load(tape, &mlp_store, false)
                    .with_override("dec.mean.layer0.weight", v);
                let model = Model::from_binding(tape, &mlp_cfg, binding)?;
                let z = tape.constant(z_in.clone());
                model.decoder(&z).map(|p| p.mu.square().sum())
            },
            &x0,
            GRAD_EPS,
        )?;
        record(results, "head::dec.mean", err);
    }

    // GRU through three chained steps, all layers
    {
        let gru_cfg = cfg.gru_cfg();
        let probe = "gru.l0.w_cand";
        let x0 = store.expect(probe)?.clone();
        let x_in = Tensor::row(&standard_normals(&mut rng, gru_cfg.input_dim));
        let err = grad_check(
            |tape, v| {
                let binding = TapeBinding::load(tape, &store, false).with_override(probe, v);
                let mut h = gru_zero_state(&gru_cfg, tape, 1);
                let x = tape.constant(x_in.clone());
                for _ in 0..3 {
                    h = gru_step(&gru_cfg, "gru", &binding, &h, &x)?;
                }
                Ok(h.last().expect("layers").square().sum())
            },
            &x0,
            GRAD_EPS,
        )?;
        record(results, "head::gru", err);
    }
    Ok(())
}

fn cfg_head(cfg: &ModelConfig, prefix: &str) -> crate::nn::MlpConfig {
    use crate::nn::{MlpConfig, OutputHead};
    let (input, output, head) = match prefix {
        "gen.z_mu" => (cfg.rnn_hidden_dim + cfg.latent_dim, cfg.latent_dim, OutputHead::Linear),
        "gen.z_sigma" => (cfg.rnn_hidden_dim + cfg.latent_dim, cfg.latent_dim, OutputHead::Softplus),
        "inf.z_mu" => (
            cfg.latent_dim + cfg.obs_dim + cfg.rnn_hidden_dim,
            cfg.latent_dim,
            OutputHead::Linear,
        ),
        "inf.z_sigma" => (
            cfg.latent_dim + cfg.obs_dim + cfg.rnn_hidden_dim,
            cfg.latent_dim,
            OutputHead::Softplus,
        ),
        "inf.local" => (cfg.latent_dim + cfg.rnn_hidden_dim, 4 * cfg.latent_dim, OutputHead::Linear),
        "inf.glob.alpha_tau" | "inf.glob.beta_tau" | "inf.glob.c" => (cfg.obs_dim, 2, OutputHead::Linear),
        "dec.sigma" => (cfg.latent_dim, cfg.obs_dim, OutputHead::Softplus),
        other => unreachable!("unknown head {other}"),
    };
    MlpConfig::new(input, &cfg.head_hidden_dims, output, head)
}

/// Checks a full ELBO step and a 5-step sequence ELBO against central
/// differences, probing several parameter tensors.
pub fn check_elbo_paths(results: &mut Vec<GradCheckResult>) -> Result<()> {
    let cfg = suite_cfg();
    let store = init_params(&cfg, 0xE1B0)?;
    let q = cfg.latent_dim;

    // single step with frozen noise
    let noise_g = standard_normals(&mut substream(1, &[0xA]), 3);
    let noise_local = standard_normals(&mut substream(2, &[0xB]), 2 * q);
    let noise_z = standard_normals(&mut substream(3, &[0xC]), q);
    for probe in ["gen.z_mu.layer0.weight", "inf.local.layer0.weight", "dec.a.weight", "gru.l0.u_update"] {
        let x0 = store.expect(probe)?.clone();
        let err = grad_check(
            |tape, v| {
                let binding = TapeBinding::load(tape, &store, false).with_override(probe, v);
                let model = Model::from_binding(tape, &cfg, binding)?;
                let pooled = tape.constant(Tensor::row(&[0.4]));
                let gn = tape.constant(Tensor::row(&noise_g));
                let (globals, kl_global) = model.sample_globals(&pooled, &gn)?;
                let state = model.initial_state(1);
                let noise = StepNoise {
                    local: tape.constant(Tensor::row(&noise_local)),
                    z: tape.constant(Tensor::row(&noise_z)),
                };
                let y = tape.constant(Tensor::row(&[0.8]));
                let u = tape.constant(Tensor::row(&[-0.3]));
                let (loss, _) = model.step_elbo(&y, &u, &state, &globals, &noise)?;
                let total = loss
                    .kl_z
                    .sub(&loss.recon)?
                    .add(&loss.kl_shrinkage)?
                    .add(&kl_global)?;
                Ok(total.sum())
            },
            &x0,
            GRAD_EPS,
        )?;
        record(results, format!("step_elbo::{probe}"), err);
    }

    // 5-step sequence ELBO
    let y_vals = [0.6, -0.4, 0.9, 0.1, -0.7];
    let u_vals = [0.2, 0.5, -0.3, 0.8, 0.0];
    let mut y = vec![0.0; 5];
    let mut u = vec![0.0; 5];
    y.copy_from_slice(&y_vals);
    u.copy_from_slice(&u_vals);
    let batch = SeriesBatch::new(
        Tensor::new(vec![1, 5, 1], y)?,
        Tensor::new(vec![1, 5, 1], u)?,
        vec![5],
        vec!["gradsuite".into()],
    )?;
    for probe in ["inf.z_mu.layer0.weight", "gen.z_sigma.layer1.weight", "inf.glob.c.layer0.weight"] {
        let x0 = store.expect(probe)?.clone();
        let err = grad_check(
            |tape, v| {
                let binding = TapeBinding::load(tape, &store, false).with_override(probe, v);
                let model = Model::from_binding(tape, &cfg, binding)?;
                element_elbo(&model, &batch, 0, 0x5EED).map(|(loss, _)| loss)
            },
            &x0,
            GRAD_EPS,
        )?;
        record(results, format!("sequence_elbo::{probe}"), err);
    }
    Ok(())
}

/// The full suite: ops at 10 seeded points each, every head, the ELBO paths.
pub fn run_gradient_suite() -> Result<Vec<GradCheckResult>> {
    let mut results = Vec::new();
    check_ops(10, &mut results);
    check_network_heads(&mut results)?;
    check_elbo_paths(&mut results)?;
    Ok(results)
}
