use super::*;
use crate::autodiff::grad_check;
use crate::distributions::kl_normal_normal;
use crate::nn::{adam_step, AdamState};
use rand::Rng;

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

fn zero_params(cfg: &ModelConfig) -> ParameterStore {
    let mut store = init_params(cfg, 0).unwrap();
    let names: Vec<String> = store.names().map(String::from).collect();
    for name in names {
        let shape = store.get(&name).unwrap().shape().to_vec();
        store.set_value(&name, Tensor::zeros(&shape)).unwrap();
    }
    store
}

fn toy_batch(cfg: &ModelConfig, ys: &[&[f64]], id_prefix: &str) -> SeriesBatch {
    let b = ys.len();
    let t = ys.iter().map(|y| y.len()).max().unwrap();
    let mut y = vec![0.0; b * t];
    let mut u = vec![0.0; b * t * cfg.covariate_dim];
    for (i, series) in ys.iter().enumerate() {
        for (step, v) in series.iter().enumerate() {
            y[i * t + step] = *v;
            u[(i * t + step) * cfg.covariate_dim] = (step as f64 * 0.3).sin();
        }
    }
    SeriesBatch::new(
        Tensor::new(vec![b, t, 1], y).unwrap(),
        Tensor::new(vec![b, t, cfg.covariate_dim], u).unwrap(),
        ys.iter().map(|y| y.len()).collect(),
        (0..b).map(|i| format!("{id_prefix}{i}")).collect(),
    )
    .unwrap()
}

#[test]
fn zeroed_generative_head_gives_standard_params() {
    let cfg = tiny_cfg();
    let store = zero_params(&cfg);
    let tape = Tape::new();
    let model = Model::bind(&tape, &cfg, &store, false).unwrap();
    let h = tape.constant(Tensor::zeros(&[1, cfg.rnn_hidden_dim]));
    let z = tape.constant(Tensor::zeros(&[1, cfg.latent_dim]));
    let p = model.generative_z_params(&h, &z).unwrap();
    assert!(p.mu.value().iter().all(|v| *v == 0.0));
    let expected = std::f64::consts::LN_2 + cfg.sigma_floor;
    for s in p.sigma.value().iter() {
        assert!((s - expected).abs() < 1e-12, "sigma {s}");
    }
}

#[test]
fn batch_rows_are_independent() {
    let cfg = tiny_cfg();
    let store = init_params(&cfg, 3).unwrap();
    let tape = Tape::new();
    let model = Model::bind(&tape, &cfg, &store, false).unwrap();
    let h_rows = [[0.1, -0.2, 0.3, 0.0], [0.9, 0.8, -0.1, 0.2], [0.0, 0.5, 0.5, -0.5]];
    let z_rows = [[1.0, -1.0], [0.2, 0.4], [0.0, 0.0]];
    let stack = |order: &[usize]| {
        let h: Vec<f64> = order.iter().flat_map(|&i| h_rows[i]).collect();
        let z: Vec<f64> = order.iter().flat_map(|&i| z_rows[i]).collect();
        let h = tape.constant(Tensor::new(vec![3, 4], h).unwrap());
        let z = tape.constant(Tensor::new(vec![3, 2], z).unwrap());
        model.generative_z_params(&h, &z).unwrap().mu.value()
    };
    let forward = stack(&[0, 1, 2]);
    let permuted = stack(&[2, 0, 1]);
    for j in 0..2 {
        assert_eq!(forward.at(0, j), permuted.at(1, j));
        assert_eq!(forward.at(1, j), permuted.at(2, j));
        assert_eq!(forward.at(2, j), permuted.at(0, j));
    }
}

#[test]
fn generative_head_gradcheck_wrt_h() {
    let cfg = tiny_cfg();
    let store = init_params(&cfg, 7).unwrap();
    let x0 = Tensor::row(&[0.2, -0.4, 0.1, 0.5]);
    let err = grad_check(
        |tape, v| {
            let model = Model::bind(tape, &cfg, &store, false)?;
            let z = tape.constant(Tensor::row(&[0.3, -0.2]));
            let p = model.generative_z_params(&v, &z)?;
            p.mu.sum().add(&p.sigma.square().sum())
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn inference_head_gradcheck_wrt_y() {
    let cfg = tiny_cfg();
    let store = init_params(&cfg, 8).unwrap();
    let y0 = Tensor::row(&[0.7]);
    let err = grad_check(
        |tape, v| {
            let model = Model::bind(tape, &cfg, &store, false)?;
            let z = tape.constant(Tensor::row(&[0.3, -0.2]));
            let h = tape.constant(Tensor::row(&[0.1, 0.2, -0.3, 0.4]));
            let p = model.inference_z_params(&z, &v, &h)?;
            p.mu.sum().add(&p.sigma.square().sum())
        },
        &y0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn inference_head_with_zero_y_block_matches_generative() {
    // Copy the generative weights into the inference head, zeroing the rows
    // that multiply y; the two heads must then agree on every input.
    let cfg = tiny_cfg();
    let mut store = init_params(&cfg, 9).unwrap();
    let (h_dim, q, m) = (cfg.rnn_hidden_dim, cfg.latent_dim, cfg.obs_dim);
    for head in ["z_mu", "z_sigma"] {
        // generative layer0: rows ordered (h, z_prev); inference: (z_prev, y, h)
        let gen_w = store.get(&format!("gen.{head}.layer0.weight")).unwrap().clone();
        let width = gen_w.shape()[1];
        let mut inf_w = vec![0.0; (q + m + h_dim) * width];
        for j in 0..width {
            for r in 0..q {
                inf_w[r * width + j] = gen_w.at(h_dim + r, j); // z_prev rows
            }
            for r in 0..h_dim {
                inf_w[(q + m + r) * width + j] = gen_w.at(r, j); // h rows
            }
        }
        store
            .set_value(
                &format!("inf.{head}.layer0.weight"),
                Tensor::new(vec![q + m + h_dim, width], inf_w).unwrap(),
            )
            .unwrap();
        for layer in 1.. {
            let name = format!("gen.{head}.layer{layer}.weight");
            let Some(w) = store.get(&name).map(Clone::clone) else { break };
            store.set_value(&format!("inf.{head}.layer{layer}.weight"), w).unwrap();
            let b = store.get(&format!("gen.{head}.layer{layer}.bias")).unwrap().clone();
            store.set_value(&format!("inf.{head}.layer{layer}.bias"), b).unwrap();
        }
        let b0 = store.get(&format!("gen.{head}.layer0.bias")).unwrap().clone();
        store.set_value(&format!("inf.{head}.layer0.bias"), b0).unwrap();
    }
    let tape = Tape::new();
    let model = Model::bind(&tape, &cfg, &store, false).unwrap();
    let h = tape.constant(Tensor::row(&[0.4, -0.1, 0.2, 0.9]));
    let z = tape.constant(Tensor::row(&[0.5, -0.7]));
    let y = tape.constant(Tensor::row(&[123.0])); // must not matter
    let gen = model.generative_z_params(&h, &z).unwrap();
    let inf = model.inference_z_params(&z, &y, &h).unwrap();
    for (a, b) in gen.mu.value().iter().zip(inf.mu.value().iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in gen.sigma.value().iter().zip(inf.sigma.value().iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn assemble_z_scalings() {
    let tape = Tape::new();
    let z_star = tape.constant(Tensor::row(&[1.5, -2.0]));
    let unit = tape.constant(Tensor::row(&[1.0, 1.0]));
    let z = assemble_z(&z_star, &unit, &unit).unwrap();
    assert_eq!(z.value().data(), &[1.5, -2.0]);

    let tiny = tape.constant(Tensor::row(&[1e-30, 1e-30]));
    let z = assemble_z(&z_star, &unit, &tiny).unwrap();
    assert!(z.value().iter().all(|v| v.abs() < 1e-14));
}

#[test]
fn assemble_z_scale_mixture_variance() {
    // z* ~ N(0,1) scaled by τ*λ = 2 has variance 4 (±0.1 at 1e5 draws).
    let tape = Tape::new();
    let tau_star_sq = tape.constant(Tensor::row(&[4.0]));
    let lambda_sq = tape.constant(Tensor::row(&[1.0]));
    let mut rng = substream(42, &[0xA55]);
    let n = 100_000;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for chunk in standard_normals(&mut rng, n) {
        let z_star = tape.constant(Tensor::row(&[chunk]));
        let z = assemble_z(&z_star, &tau_star_sq, &lambda_sq).unwrap().value().data()[0];
        sum += z;
        sum_sq += z * z;
    }
    let var = sum_sq / n as f64 - (sum / n as f64).powi(2);
    assert!((var - 4.0).abs() < 0.1, "var {var}");
}

#[test]
fn linear_decoder_identity_and_affinity() {
    let cfg = ModelConfig {
        latent_dim: 2,
        obs_dim: 2,
        ..tiny_cfg()
    };
    let mut store = zero_params(&cfg);
    store
        .set_value("dec.a.weight", Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap())
        .unwrap();
    let tape = Tape::new();
    let model = Model::bind(&tape, &cfg, &store, false).unwrap();
    let z = tape.constant(Tensor::row(&[1.0, 2.0]));
    let out = model.decoder(&z).unwrap();
    assert_eq!(out.mu.value().data(), &[1.0, 2.0]);

    // zero latent, zero nets: mean 0, sigma = softplus(0) + floor
    let z0 = tape.constant(Tensor::zeros(&[1, 2]));
    let out0 = model.decoder(&z0).unwrap();
    assert!(out0.mu.value().iter().all(|v| *v == 0.0));
    assert!((out0.sigma.value().data()[0] - (std::f64::consts::LN_2 + cfg.sigma_floor)).abs() < 1e-12);

    // affinity of the mean under a generic weight matrix
    let mut rng = substream(77, &[]);
    let w: Vec<f64> = (0..4).map(|_| rng.random::<f64>() - 0.5).collect();
    let b: Vec<f64> = (0..2).map(|_| rng.random::<f64>() - 0.5).collect();
    let mut store2 = zero_params(&cfg);
    store2.set_value("dec.a.weight", Tensor::new(vec![2, 2], w).unwrap()).unwrap();
    store2.set_value("dec.a.bias", Tensor::new(vec![1, 2], b).unwrap()).unwrap();
    let tape2 = Tape::new();
    let model2 = Model::bind(&tape2, &cfg, &store2, false).unwrap();
    let dec_mean = |vals: &[f64]| {
        let z = tape2.constant(Tensor::row(vals));
        model2.decoder(&z).unwrap().mu.value()
    };
    let z1 = [0.7, -0.4];
    let z2 = [-1.2, 0.9];
    let sum = dec_mean(&[z1[0] + z2[0], z1[1] + z2[1]]);
    let (a, b2, zero) = (dec_mean(&z1), dec_mean(&z2), dec_mean(&[0.0, 0.0]));
    for j in 0..2 {
        let lhs = sum.at(0, j);
        let rhs = a.at(0, j) + b2.at(0, j) - zero.at(0, j);
        assert!((lhs - rhs).abs() < 1e-12, "affinity at dim {j}");
    }
}

#[test]
fn step_elbo_zeroed_z_heads_have_zero_kl() {
    let cfg = tiny_cfg();
    let mut store = init_params(&cfg, 4).unwrap();
    for head in ["gen.z_mu", "gen.z_sigma", "inf.z_mu", "inf.z_sigma"] {
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(head))
            .map(String::from)
            .collect();
        for n in names {
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.set_value(&n, Tensor::zeros(&shape)).unwrap();
        }
    }
    let tape = Tape::new();
    let model = Model::bind(&tape, &cfg, &store, false).unwrap();
    let pooled = tape.constant(Tensor::row(&[0.5]));
    let g_noise = tape.constant(Tensor::row(&standard_normals(&mut substream(1, &[]), 3)));
    let (globals, _) = model.sample_globals(&pooled, &g_noise).unwrap();
    let state = model.initial_state(1);
    let noise = StepNoise {
        local: tape.constant(Tensor::row(&standard_normals(&mut substream(2, &[]), 4))),
        z: tape.constant(Tensor::row(&standard_normals(&mut substream(3, &[]), 2))),
    };
    let y = tape.constant(Tensor::row(&[0.3]));
    let u = tape.constant(Tensor::row(&[0.1]));
    let (loss, _) = model.step_elbo(&y, &u, &state, &globals, &noise).unwrap();
    assert!(loss.kl_z.value().data()[0].abs() < 1e-14);
}

#[test]
fn step_elbo_is_finite_for_huge_observations() {
    let cfg = tiny_cfg();
    let store = init_params(&cfg, 5).unwrap();
    let tape = Tape::new();
    let model = Model::bind(&tape, &cfg, &store, false).unwrap();
    let pooled = tape.constant(Tensor::row(&[1e3]));
    let g_noise = tape.constant(Tensor::row(&standard_normals(&mut substream(1, &[]), 3)));
    let (globals, _) = model.sample_globals(&pooled, &g_noise).unwrap();
    let state = model.initial_state(1);
    let noise = StepNoise {
        local: tape.constant(Tensor::row(&standard_normals(&mut substream(2, &[]), 4))),
        z: tape.constant(Tensor::row(&standard_normals(&mut substream(3, &[]), 2))),
    };
    let y = tape.constant(Tensor::row(&[1e3]));
    let u = tape.constant(Tensor::row(&[0.0]));
    let (loss, _) = model.step_elbo(&y, &u, &state, &globals, &noise).unwrap();
    let total = loss.kl_z.sub(&loss.recon).unwrap().add(&loss.kl_shrinkage).unwrap();
    assert!(total.value().data()[0].is_finite());
}

#[test]
fn step_elbo_hand_computed_reconstruction() {
    // 1-dim model, A = 1 (bias 0), σ_y = σ_z = 1, μ heads zero, shrinkage
    // pinned at τ*λ = 1 via a saturated c head; with y = 0 and ε = 0 the
    // reconstruction is log N(0; 0, 1) = −½·log(2π) = −0.9189...
    let cfg = ModelConfig {
        obs_dim: 1,
        covariate_dim: 1,
        latent_dim: 1,
        rnn_hidden_dim: 2,
        rnn_layers: 1,
        head_hidden_dims: vec![],
        ..ModelConfig::default()
    };
    let mut store = zero_params(&cfg);
    store.set_value("dec.a.weight", Tensor::row(&[1.0])).unwrap();
    // softplus(b) + floor = 1  =>  b = ln(exp(1 - floor) - 1)
    let b = ((1.0 - cfg.sigma_floor).exp() - 1.0f64).ln();
    store.set_value("dec.sigma.layer0.bias", Tensor::row(&[b])).unwrap();
    store.set_value("gen.z_sigma.layer0.bias", Tensor::row(&[b])).unwrap();
    store.set_value("inf.z_sigma.layer0.bias", Tensor::row(&[b])).unwrap();
    // push c² to e^50 so τ*² = c²/(c² + 1) is 1 within 1e-15
    store
        .set_value("inf.glob.c.layer0.bias", Tensor::row(&[50.0, 0.0]))
        .unwrap();
    let tape = Tape::new();
    let model = Model::bind(&tape, &cfg, &store, false).unwrap();
    let pooled = tape.constant(Tensor::row(&[0.0]));
    let zeros3 = tape.constant(Tensor::zeros(&[1, 3]));
    let (globals, _) = model.sample_globals(&pooled, &zeros3).unwrap();
    assert_eq!(globals.tau_sq.value().data()[0], 1.0);
    let state = model.initial_state(1);
    let noise = StepNoise {
        local: tape.constant(Tensor::zeros(&[1, 2])),
        z: tape.constant(Tensor::zeros(&[1, 1])),
    };
    let y = tape.constant(Tensor::row(&[0.0]));
    let u = tape.constant(Tensor::row(&[0.0]));
    let (loss, state) = model.step_elbo(&y, &u, &state, &globals, &noise).unwrap();
    assert!(state.z.value().data()[0].abs() < 1e-12, "z̃ = ε = 0");
    let recon = loss.recon.value().data()[0];
    assert!((recon - (-0.918_938_533_204_672_7)).abs() < 1e-6, "recon {recon}");
}

#[test]
fn kl_cancellation_between_scaled_and_unscaled_forms() {
    // KL(N(μq·s, σq·s) ‖ N(μp·s, σp·s)) == KL(N(μq, σq) ‖ N(μp, σp))
    let mut rng = substream(64, &[]);
    let tape = Tape::new();
    for _ in 0..200 {
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            (rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 2.0 + 0.05)
        };
        let (mq, sq) = mk(&mut rng);
        let (mp, sp) = mk(&mut rng);
        let s = 10f64.powf(rng.random::<f64>() * 6.0 - 3.0); // shrinkage scale
        let pair = |m: f64, sd: f64| {
            NormalParams::new(tape.constant(Tensor::row(&[m])), tape.constant(Tensor::row(&[sd])))
                .unwrap()
        };
        let plain = kl_normal_normal(&pair(mq, sq), &pair(mp, sp)).unwrap().value().data()[0];
        let scaled = kl_normal_normal(&pair(mq * s, sq * s), &pair(mp * s, sp * s))
            .unwrap()
            .value()
            .data()[0];
        assert!((plain - scaled).abs() < 1e-10, "plain {plain} scaled {scaled} s {s}");
    }
}

#[test]
fn noise_leaves_no_gradient() {
    let cfg = tiny_cfg();
    let store = init_params(&cfg, 12).unwrap();
    let batch = toy_batch(&cfg, &[&[0.5, -0.3, 0.8]], "g");
    let tape = Tape::new();
    let model = Model::bind(&tape, &cfg, &store, true).unwrap();
    let (loss, _) = element_elbo(&model, &batch, 0, 99).unwrap();
    tape.backward(loss).unwrap();
    // every constant (data, noise) node must stay gradient-free
    let z = tape.constant(Tensor::row(&[1.0]));
    assert!(z.grad().is_none());
}

#[test]
fn sequence_elbo_single_step_decomposition() {
    // T=1: the sequence loss equals the step terms plus the global KL.
    let cfg = tiny_cfg();
    let store = init_params(&cfg, 13).unwrap();
    let batch = toy_batch(&cfg, &[&[0.7]], "one");
    let report = sequence_elbo(&cfg, &store, &batch, 5).unwrap();
    let manual = report.kl_z - report.recon + report.kl_shrinkage + report.kl_global;
    assert!((report.loss - manual).abs() < 1e-12, "{} vs {manual}", report.loss);
}

#[test]
fn duplicated_batch_has_identical_mean_loss() {
    let cfg = tiny_cfg();
    let store = init_params(&cfg, 14).unwrap();
    let single = toy_batch(&cfg, &[&[0.4, 0.1, -0.2, 0.9]], "dup");
    let doubled = SeriesBatch::concat(&[&single, &single]).unwrap();
    let a = sequence_elbo(&cfg, &store, &single, 21).unwrap();
    let b = sequence_elbo(&cfg, &store, &doubled, 21).unwrap();
    assert!((a.loss - b.loss).abs() < 1e-12, "{} vs {}", a.loss, b.loss);
}

#[test]
fn empty_batch_is_an_error() {
    let cfg = tiny_cfg();
    let store = init_params(&cfg, 1).unwrap();
    let batch = SeriesBatch::new(
        Tensor::new(vec![0, 1, 1], vec![]).unwrap(),
        Tensor::new(vec![0, 1, 1], vec![]).unwrap(),
        vec![],
        vec![],
    )
    .unwrap();
    assert!(sequence_elbo(&cfg, &store, &batch, 0).is_err());
}

#[test]
fn overfit_smoke_loss_decreases() {
    // 200 Adam steps on one small fixed batch with frozen noise.
    let cfg = tiny_cfg();
    let mut store = init_params(&cfg, 15).unwrap();
    let batch = toy_batch(
        &cfg,
        &[&[0.9, 0.7, 0.5, 0.8, 1.1, 0.6, 0.4, 0.9], &[-0.2, 0.1, -0.4, 0.0, -0.1, -0.3, 0.2, -0.2]],
        "fit",
    );
    let initial = sequence_elbo(&cfg, &store, &batch, 1).unwrap().loss;
    let mut state = AdamState::new(&store);
    let mut last = initial;
    for _ in 0..200 {
        let (report, grads) = sequence_elbo_grad(&cfg, &store, &batch, 1).unwrap();
        let names: Vec<String> = store.names().map(String::from).collect();
        for (name, g) in names.iter().zip(&grads) {
            store.accumulate_grad(name, g).unwrap();
        }
        adam_step(&mut store, &mut state, 1e-2).unwrap();
        last = report.loss;
    }
    assert!(last < initial, "loss {initial} -> {last}");
}

#[test]
fn gradients_match_finite_differences_through_a_full_step() {
    let cfg = tiny_cfg();
    let store = init_params(&cfg, 16).unwrap();
    let batch = toy_batch(&cfg, &[&[0.5, -0.1, 0.3]], "fd");
    // probe one weight matrix of the generative mean head
    let probe = "gen.z_mu.layer0.weight";
    let x0 = store.get(probe).unwrap().clone();
    let err = grad_check(
        |tape, v| {
            let binding = TapeBinding::load(tape, &store, false).with_override(probe, v);
            let model = Model::from_binding(tape, &cfg, binding)?;
            element_elbo(&model, &batch, 0, 31).map(|(loss, _)| loss)
        },
        &x0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "rel err {err}");
}
