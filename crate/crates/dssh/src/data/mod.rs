//! Datasets: series batches, windowing, simulators, CSV panels, and the
//! exact Kalman oracle for the linear-Gaussian simulator.

mod csv_panel;
mod kalman;
mod simulate;

pub use csv_panel::{
    default_start, export_csv_panel, export_latents_csv, load_csv_panel, load_latents_csv,
    CovariateSpec,
};
pub use kalman::{kalman_filter_loglik, KalmanOutput};
pub use simulate::{
    simulate_linear_ssm, simulate_seasonal_panel, LinearSsmSpec, SeasonalPanelSpec,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// A batch of (possibly variable-length) series with covariates.
///
/// `y` is `[batch × T × M]`, `u` is `[batch × T × N]` with `T` the maximum
/// length; rows past a series' length are zero. `scale` records the
/// standardization factor applied to `y` (1.0 when raw). Simulated test
/// batches may carry their true latent paths for recovery scoring.
#[derive(Debug, Clone)]
pub struct SeriesBatch {
    pub y: Tensor,
    pub u: Tensor,
    pub lengths: Vec<usize>,
    pub scale: Vec<f64>,
    pub ids: Vec<String>,
    pub latents: Option<Tensor>,
}

impl SeriesBatch {
    pub fn new(y: Tensor, u: Tensor, lengths: Vec<usize>, ids: Vec<String>) -> Result<Self> {
        if y.rank() != 3 || u.rank() != 3 {
            return Err(Error::Data("SeriesBatch tensors must be rank 3".into()));
        }
        let (b, t) = (y.shape()[0], y.shape()[1]);
        if u.shape()[0] != b || u.shape()[1] != t {
            return Err(Error::ShapeMismatch {
                op: "SeriesBatch",
                lhs: y.shape().to_vec(),
                rhs: u.shape().to_vec(),
            });
        }
        if lengths.len() != b || ids.len() != b {
            return Err(Error::Data("lengths/ids must match batch size".into()));
        }
        if lengths.iter().any(|l| *l > t) {
            return Err(Error::Data("series length exceeds tensor extent".into()));
        }
        let mut batch = SeriesBatch {
            y,
            u,
            lengths,
            scale: vec![1.0; b],
            ids,
            latents: None,
        };
        batch.zero_masked();
        Ok(batch)
    }

    fn zero_masked(&mut self) {
        let (b, t, m) = (self.n_series(), self.max_len(), self.obs_dim());
        let n = self.cov_dim();
        for i in 0..b {
            let len = self.lengths[i];
            for step in len..t {
                for j in 0..m {
                    self.y.data_mut()[(i * t + step) * m + j] = 0.0;
                }
                for j in 0..n {
                    self.u.data_mut()[(i * t + step) * n + j] = 0.0;
                }
            }
        }
    }

    pub fn n_series(&self) -> usize {
        self.y.shape()[0]
    }

    /// Maximum (padded) series length.
    pub fn max_len(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn obs_dim(&self) -> usize {
        self.y.shape()[2]
    }

    pub fn cov_dim(&self) -> usize {
        self.u.shape()[2]
    }

    /// The `[M]` observation row of series `i` at time `t`.
    pub fn y_row(&self, i: usize, t: usize) -> &[f64] {
        let m = self.obs_dim();
        let start = (i * self.max_len() + t) * m;
        &self.y.data()[start..start + m]
    }

    /// The `[N]` covariate row of series `i` at time `t`.
    pub fn u_row(&self, i: usize, t: usize) -> &[f64] {
        let n = self.cov_dim();
        let start = (i * self.max_len() + t) * n;
        &self.u.data()[start..start + n]
    }

    /// Mean of `|y|` over the valid steps of series `i`.
    pub fn mean_abs_y(&self, i: usize) -> f64 {
        let len = self.lengths[i];
        if len == 0 {
            return 0.0;
        }
        let m = self.obs_dim();
        let mut sum = 0.0;
        for t in 0..len {
            for v in self.y_row(i, t) {
                sum += v.abs();
            }
        }
        sum / (len * m) as f64
    }

    /// Mean of `y` over the valid steps of series `i` (per dimension).
    pub fn mean_y(&self, i: usize) -> Vec<f64> {
        let m = self.obs_dim();
        let len = self.lengths[i];
        let mut out = vec![0.0; m];
        if len == 0 {
            return out;
        }
        for t in 0..len {
            for (o, v) in out.iter_mut().zip(self.y_row(i, t)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= len as f64;
        }
        out
    }

    /// A new batch holding copies of the selected series.
    pub fn select(&self, indices: &[usize]) -> Result<SeriesBatch> {
        let (t, m, n) = (self.max_len(), self.obs_dim(), self.cov_dim());
        let b = indices.len();
        let mut y = Vec::with_capacity(b * t * m);
        let mut u = Vec::with_capacity(b * t * n);
        let mut lengths = Vec::with_capacity(b);
        let mut ids = Vec::with_capacity(b);
        let mut scale = Vec::with_capacity(b);
        let mut latents = self.latents.as_ref().map(|_| Vec::new());
        for &i in indices {
            if i >= self.n_series() {
                return Err(Error::Data(format!("series index {i} out of range")));
            }
            y.extend_from_slice(&self.y.data()[i * t * m..(i + 1) * t * m]);
            u.extend_from_slice(&self.u.data()[i * t * n..(i + 1) * t * n]);
            lengths.push(self.lengths[i]);
            ids.push(self.ids[i].clone());
            scale.push(self.scale[i]);
            if let (Some(dst), Some(src)) = (latents.as_mut(), self.latents.as_ref()) {
                let d = src.shape()[2];
                dst.extend_from_slice(&src.data()[i * t * d..(i + 1) * t * d]);
            }
        }
        let mut out = SeriesBatch::new(
            Tensor::new(vec![b, t, m], y)?,
            Tensor::new(vec![b, t, n], u)?,
            lengths,
            ids,
        )?;
        out.scale = scale;
        out.latents = match (latents, self.latents.as_ref()) {
            (Some(data), Some(src)) => Some(Tensor::new(vec![b, t, src.shape()[2]], data)?),
            _ => None,
        };
        Ok(out)
    }

    /// Extracts `[origin, origin + len)` of one series as a batch of one.
    pub fn slice_window(&self, series: usize, origin: usize, len: usize) -> Result<SeriesBatch> {
        if origin + len > self.lengths[series] {
            return Err(Error::Data(format!(
                "window {origin}..{} exceeds series length {}",
                origin + len,
                self.lengths[series]
            )));
        }
        let (t, m, n) = (self.max_len(), self.obs_dim(), self.cov_dim());
        let mut y = Vec::with_capacity(len * m);
        let mut u = Vec::with_capacity(len * n);
        for step in origin..origin + len {
            y.extend_from_slice(self.y_row(series, step));
            u.extend_from_slice(self.u_row(series, step));
        }
        let mut out = SeriesBatch::new(
            Tensor::new(vec![1, len, m], y)?,
            Tensor::new(vec![1, len, n], u)?,
            vec![len],
            vec![format!("{}@{}", self.ids[series], origin)],
        )?;
        out.scale = vec![self.scale[series]];
        if let Some(src) = self.latents.as_ref() {
            let d = src.shape()[2];
            let mut lat = Vec::with_capacity(len * d);
            for step in origin..origin + len {
                let start = (series * t + step) * d;
                lat.extend_from_slice(&src.data()[start..start + d]);
            }
            out.latents = Some(Tensor::new(vec![1, len, d], lat)?);
        }
        Ok(out)
    }

    /// Concatenates batches of identical dims along the series axis.
    pub fn concat(batches: &[&SeriesBatch]) -> Result<SeriesBatch> {
        let first = batches.first().ok_or_else(|| Error::Data("empty concat".into()))?;
        let (t, m, n) = (first.max_len(), first.obs_dim(), first.cov_dim());
        let mut y = Vec::new();
        let mut u = Vec::new();
        let mut lengths = Vec::new();
        let mut ids = Vec::new();
        let mut scale = Vec::new();
        for b in batches {
            if b.max_len() != t || b.obs_dim() != m || b.cov_dim() != n {
                return Err(Error::Data("concat dims mismatch".into()));
            }
            y.extend_from_slice(b.y.data());
            u.extend_from_slice(b.u.data());
            lengths.extend_from_slice(&b.lengths);
            ids.extend(b.ids.iter().cloned());
            scale.extend_from_slice(&b.scale);
        }
        let total = lengths.len();
        let mut out = SeriesBatch::new(
            Tensor::new(vec![total, t, m], y)?,
            Tensor::new(vec![total, t, n], u)?,
            lengths,
            ids,
        )?;
        out.scale = scale;
        Ok(out)
    }
}

/// A training/evaluation window: `context_len` conditioning steps followed by
/// `horizon` target steps, starting at `origin` within a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub series: usize,
    pub origin: usize,
    pub context_len: usize,
    pub horizon: usize,
}

impl Window {
    pub fn total_len(&self) -> usize {
        self.context_len + self.horizon
    }
}

/// Sliding windows over every series; series shorter than `L + p` are
/// skipped and counted.
pub fn make_windows(
    batch: &SeriesBatch,
    context_len: usize,
    horizon: usize,
    stride: usize,
) -> Result<(Vec<Window>, usize)> {
    if context_len == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config("window dims and stride must be >= 1".into()));
    }
    let total = context_len + horizon;
    let mut windows = Vec::new();
    let mut skipped = 0;
    for series in 0..batch.n_series() {
        let len = batch.lengths[series];
        if len < total {
            skipped += 1;
            continue;
        }
        let mut origin = 0;
        while origin + total <= len {
            windows.push(Window {
                series,
                origin,
                context_len,
                horizon,
            });
            origin += stride;
        }
    }
    Ok((windows, skipped))
}
