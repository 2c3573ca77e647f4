//! Feed-forward and recurrent layers, initialization, and the optimizer.
//!
//! Parameters live in a [`ParameterStore`] keyed by dotted paths; each forward
//! pass binds them onto a [`Tape`](crate::autodiff::Tape) through a
//! [`TapeBinding`]. Layers are plain functions over those bindings, so the
//! same code serves training (gradient leaves) and evaluation (constants).

mod adam;
mod params;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use params::{ParameterStore, TapeBinding};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// Output transform of the last affine layer of an MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Linear,
    /// Stable `log(1+exp(x))` on the final affine output.
    Softplus,
}

/// Feed-forward network: affine → tanh per hidden layer, then an affine
/// output layer with an optional softplus head. Hidden activation is tanh
/// throughout.
#[derive(Debug, Clone)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub output_head: OutputHead,
}

impl MlpConfig {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize, head: OutputHead) -> Self {
        MlpConfig {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            output_head: head,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(self.output_dim));
        for d in all {
            if d == 0 {
                return Err(Error::Config("MLP dims must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Layer dimensions as (in, out) pairs.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }
}

/// Stacked GRU cell.
#[derive(Debug, Clone)]
pub struct GruConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl GruConfig {
    pub fn new(input_dim: usize, hidden_dim: usize, num_layers: usize) -> Self {
        GruConfig {
            input_dim,
            hidden_dim,
            num_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(Error::Config("GRU dims and layer count must be >= 1".into()));
        }
        Ok(())
    }
}

const GRU_GATES: [&str; 3] = ["reset", "update", "cand"];

fn uniform_fan_in(rng: &mut ChaCha8Rng, fan_in: usize, rows: usize, cols: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
        .collect();
    Tensor::new(vec![rows, cols], data).expect("init shape")
}

/// Registers `{prefix}.layer{i}.weight` / `.bias` for every affine layer of
/// `cfg`. Weights are `U(−√(1/fan_in), +√(1/fan_in))`, biases zero.
pub fn init_mlp(
    store: &mut ParameterStore,
    prefix: &str,
    cfg: &MlpConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    for (i, (fan_in, fan_out)) in cfg.layer_dims().into_iter().enumerate() {
        store.insert(
            format!("{prefix}.layer{i}.weight"),
            uniform_fan_in(rng, fan_in, fan_in, fan_out),
        )?;
        store.insert(
            format!("{prefix}.layer{i}.bias"),
            Tensor::zeros(&[1, fan_out]),
        )?;
    }
    Ok(())
}

/// Registers GRU parameters `{prefix}.l{layer}.{w,u,b}_{reset,update,cand}`.
/// The update-gate bias starts at +1.0 so early steps carry state.
pub fn init_gru(
    store: &mut ParameterStore,
    prefix: &str,
    cfg: &GruConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    cfg.validate()?;
    for layer in 0..cfg.num_layers {
        let in_dim = if layer == 0 { cfg.input_dim } else { cfg.hidden_dim };
        for gate in GRU_GATES {
            store.insert(
                format!("{prefix}.l{layer}.w_{gate}"),
                uniform_fan_in(rng, in_dim, in_dim, cfg.hidden_dim),
            )?;
            store.insert(
                format!("{prefix}.l{layer}.u_{gate}"),
                uniform_fan_in(rng, cfg.hidden_dim, cfg.hidden_dim, cfg.hidden_dim),
            )?;
            let bias = if gate == "update" { 1.0 } else { 0.0 };
            let mut b = Tensor::zeros(&[1, cfg.hidden_dim]);
            b.data_mut().fill(bias);
            store.insert(format!("{prefix}.l{layer}.b_{gate}"), b)?;
        }
    }
    Ok(())
}

/// Affine layer `x·W + b` with the bias row broadcast over the batch.
fn affine<'t>(
    binding: &TapeBinding<'t>,
    prefix: &str,
    layer: usize,
    x: &Var<'t>,
) -> Result<Var<'t>> {
    let w = binding.var(&format!("{prefix}.layer{layer}.weight"))?;
    let b = binding.var(&format!("{prefix}.layer{layer}.bias"))?;
    let rows = x.shape()[0];
    x.matmul(&w)?.add(&b.broadcast_rows(rows)?)
}

/// Runs the MLP `prefix` on a `[batch × input_dim]` input.
pub fn mlp_forward<'t>(
    cfg: &MlpConfig,
    prefix: &str,
    binding: &TapeBinding<'t>,
    x: &Var<'t>,
) -> Result<Var<'t>> {
    if x.shape().len() != 2 || x.shape()[1] != cfg.input_dim {
        return Err(Error::ShapeMismatch {
            op: "mlp_forward",
            lhs: x.shape(),
            rhs: vec![0, cfg.input_dim],
        });
    }
    let n_layers = cfg.hidden_dims.len() + 1;
    let mut h = *x;
    for i in 0..n_layers {
        h = affine(binding, prefix, i, &h)?;
        if i + 1 < n_layers {
            h = h.tanh();
        }
    }
    Ok(match cfg.output_head {
        OutputHead::Linear => h,
        OutputHead::Softplus => h.softplus(),
    })
}

/// One GRU time-step over all layers.
///
/// Per layer: `r = σ(x·Wr + h·Ur + br)`, `ζ = σ(x·Wu + h·Uu + bu)`,
/// `ĥ = tanh(x·Wc + (r⊙h)·Uc + bc)`, `h' = (1−ζ)⊙ĥ + ζ⊙h`; each layer's
/// output feeds the next. Returns all layer states; the last is the output.
pub fn gru_step<'t>(
    cfg: &GruConfig,
    prefix: &str,
    binding: &TapeBinding<'t>,
    h_prev: &[Var<'t>],
    x: &Var<'t>,
) -> Result<Vec<Var<'t>>> {
    if h_prev.len() != cfg.num_layers {
        return Err(Error::Config(format!(
            "gru_step: {} states for {} layers",
            h_prev.len(),
            cfg.num_layers
        )));
    }
    if x.shape().len() != 2 || x.shape()[1] != cfg.input_dim {
        return Err(Error::ShapeMismatch {
            op: "gru_step",
            lhs: x.shape(),
            rhs: vec![0, cfg.input_dim],
        });
    }
    let rows = x.shape()[0];
    let mut input = *x;
    let mut states = Vec::with_capacity(cfg.num_layers);
    for layer in 0..cfg.num_layers {
        let h = h_prev[layer];
        if h.shape() != [rows, cfg.hidden_dim] {
            return Err(Error::ShapeMismatch {
                op: "gru_step",
                lhs: h.shape(),
                rhs: vec![rows, cfg.hidden_dim],
            });
        }
        let gate = |g: &str, pre: &Var<'t>| -> Result<Var<'t>> {
            let w = binding.var(&format!("{prefix}.l{layer}.w_{g}"))?;
            let u = binding.var(&format!("{prefix}.l{layer}.u_{g}"))?;
            let b = binding.var(&format!("{prefix}.l{layer}.b_{g}"))?;
            input
                .matmul(&w)?
                .add(&pre.matmul(&u)?)?
                .add(&b.broadcast_rows(rows)?)
        };
        let r = gate("reset", &h)?.sigmoid();
        let z = gate("update", &h)?.sigmoid();
        let cand = {
            let rh = r.mul(&h)?;
            gate("cand", &rh)?.tanh()
        };
        let keep = z.mul(&h)?;
        let renew = z.neg().add_scalar(1.0).mul(&cand)?;
        let h_new = keep.add(&renew)?;
        states.push(h_new);
        input = h_new;
    }
    Ok(states)
}

/// Zero initial state for every GRU layer.
pub fn gru_zero_state<'t>(
    cfg: &GruConfig,
    tape: &'t crate::autodiff::Tape,
    batch: usize,
) -> Vec<Var<'t>> {
    (0..cfg.num_layers)
        .map(|_| tape.constant(Tensor::zeros(&[batch, cfg.hidden_dim])))
        .collect()
}
