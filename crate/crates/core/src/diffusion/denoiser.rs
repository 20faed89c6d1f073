use crate::math;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use crate::autograd::{Tape, Var};
use crate::grid::{cnhw_to_grids, grids_to_cnhw};
use crate::nn::{init_normal, Bound, ParamStore};
use crate::rng;
use crate::{Error, GridShape, LatentGrid, Result, Tensor};

/// A noise-prediction network `eps_theta(x_t, t)`.
///
/// Implementations must be deterministic, return grids of the input shape,
/// and be shareable across threads for read-only inference.
pub trait Denoiser: Sync {
    /// Predicts the noise in each `xs[i]` at step `ts[i]`.
    fn predict_batch(&self, xs: &[LatentGrid], ts: &[usize]) -> Result<Vec<LatentGrid>>;

    fn predict(&self, x_t: &LatentGrid, t: usize) -> Result<LatentGrid> {
        let mut out = self.predict_batch(core::slice::from_ref(x_t), &[t])?;
        Ok(out.pop().expect("one prediction per input"))
    }

    /// Trainable parameters, when the denoiser has any.
    fn parameters(&self) -> Option<&ParamStore> {
        None
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_batch(&self, xs: &[LatentGrid], ts: &[usize]) -> Result<Vec<LatentGrid>> {
        (**self).predict_batch(xs, ts)
    }

    fn parameters(&self) -> Option<&ParamStore> {
        (**self).parameters()
    }
}

/// Wraps a denoiser and counts one call per predicted grid.
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn predict_batch(&self, xs: &[LatentGrid], ts: &[usize]) -> Result<Vec<LatentGrid>> {
        self.calls.fetch_add(xs.len(), Ordering::Relaxed);
        self.inner.predict_batch(xs, ts)
    }

    fn parameters(&self) -> Option<&ParamStore> {
        self.inner.parameters()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    /// Hidden channel width of every residual block.
    pub width: usize,
    pub blocks: usize,
    /// Length of the sinusoidal timestep embedding (even).
    pub time_dim: usize,
    /// Width of the timestep MLP.
    pub time_hidden: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            width: 16,
            blocks: 2,
            time_dim: 16,
            time_hidden: 32,
        }
    }
}

/// Small residual convolutional noise predictor.
///
/// `conv_in -> blocks x [silu, conv, +time, silu, conv, skip] -> silu -> conv_out`,
/// every conv 3x3 with padding 1. The timestep enters each block as a
/// per-channel bias projected from a shared sinusoidal-embedding MLP.
#[derive(Clone, Debug)]
pub struct ConvDenoiser {
    config: DenoiserConfig,
    params: ParamStore,
}

/// `[time_dim, N]` sinusoidal embedding of integer steps.
pub(crate) fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let n = ts.len();
    let mut out = vec![0.0; dim * n];
    for k in 0..half {
        let freq = math::exp(-math::ln(10_000.0) * k as f64 / half as f64);
        for (j, &t) in ts.iter().enumerate() {
            let arg = t as f64 * freq;
            out[k * n + j] = math::sin(arg);
            out[(k + half) * n + j] = math::cos(arg);
        }
    }
    Tensor::from_vec(&[dim, n], out).expect("embedding shape")
}

impl ConvDenoiser {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let (c, w, th, td) = (
            config.latent_channels,
            config.width,
            config.time_hidden,
            config.time_dim,
        );
        let mut p = ParamStore::new();
        p.insert("time.w", init_normal(&mut r, &[th, td], td, 1.0))?;
        p.insert("time.b", Tensor::zeros(&[th]))?;
        p.insert("conv_in.w", init_normal(&mut r, &[w, c, 3, 3], c * 9, 1.0))?;
        p.insert("conv_in.b", Tensor::zeros(&[w]))?;
        for i in 0..config.blocks {
            p.insert(format!("block{i}.conv1.w"), init_normal(&mut r, &[w, w, 3, 3], w * 9, 1.0))?;
            p.insert(format!("block{i}.conv1.b"), Tensor::zeros(&[w]))?;
            p.insert(format!("block{i}.time.w"), init_normal(&mut r, &[w, th], th, 1.0))?;
            p.insert(format!("block{i}.time.b"), Tensor::zeros(&[w]))?;
            p.insert(format!("block{i}.conv2.w"), init_normal(&mut r, &[w, w, 3, 3], w * 9, 0.5))?;
            p.insert(format!("block{i}.conv2.b"), Tensor::zeros(&[w]))?;
        }
        p.insert("conv_out.w", init_normal(&mut r, &[c, w, 3, 3], w * 9, 0.5))?;
        p.insert("conv_out.b", Tensor::zeros(&[c]))?;
        Self::from_params(config, p)
    }

    /// Wraps an existing parameter set after checking every name and shape.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        if config.time_dim % 2 != 0 || config.time_dim == 0 {
            return Err(Error::Parameter(format!(
                "time embedding length must be even and positive, got {}",
                config.time_dim
            )));
        }
        let (c, w, th, td) = (
            config.latent_channels,
            config.width,
            config.time_hidden,
            config.time_dim,
        );
        params.expect("time.w", &[th, td])?;
        params.expect("time.b", &[th])?;
        params.expect("conv_in.w", &[w, c, 3, 3])?;
        params.expect("conv_in.b", &[w])?;
        for i in 0..config.blocks {
            params.expect(&format!("block{i}.conv1.w"), &[w, w, 3, 3])?;
            params.expect(&format!("block{i}.conv1.b"), &[w])?;
            params.expect(&format!("block{i}.time.w"), &[w, th])?;
            params.expect(&format!("block{i}.time.b"), &[w])?;
            params.expect(&format!("block{i}.conv2.w"), &[w, w, 3, 3])?;
            params.expect(&format!("block{i}.conv2.b"), &[w])?;
        }
        params.expect("conv_out.w", &[c, w, 3, 3])?;
        params.expect("conv_out.b", &[c])?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> DenoiserConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    /// Records the network on `tape`; `x` is `[C, N, H, W]`.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound<'_>, x: Var, ts: &[usize]) -> Var {
        let emb = tape.constant(timestep_embedding(ts, self.config.time_dim));
        let th = tape.matmul(p.var("time.w"), emb);
        let th = tape.add_col_bias(th, p.var("time.b"));
        let th = tape.silu(th);

        let mut h = tape.conv2d(x, p.var("conv_in.w"), Some(p.var("conv_in.b")), 1, 1);
        for i in 0..self.config.blocks {
            let r = tape.silu(h);
            let r = tape.conv2d(
                r,
                p.var(&format!("block{i}.conv1.w")),
                Some(p.var(&format!("block{i}.conv1.b"))),
                1,
                1,
            );
            let tb = tape.matmul(p.var(&format!("block{i}.time.w")), th);
            let tb = tape.add_col_bias(tb, p.var(&format!("block{i}.time.b")));
            let r = tape.add_channel_bias(r, tb);
            let r = tape.silu(r);
            let r = tape.conv2d(
                r,
                p.var(&format!("block{i}.conv2.w")),
                Some(p.var(&format!("block{i}.conv2.b"))),
                1,
                1,
            );
            h = tape.add(h, r);
        }
        let h = tape.silu(h);
        tape.conv2d(h, p.var("conv_out.w"), Some(p.var("conv_out.b")), 1, 1)
    }

    fn check_inputs(&self, xs: &[LatentGrid], ts: &[usize]) -> Result<GridShape> {
        if xs.len() != ts.len() {
            return Err(Error::Shape(format!("{} grids but {} steps", xs.len(), ts.len())));
        }
        let shape = xs[0].shape();
        if shape.channels != self.config.latent_channels {
            return Err(Error::Shape(format!(
                "denoiser expects {} channels, got {}",
                self.config.latent_channels, shape.channels
            )));
        }
        Ok(shape)
    }
}

/// Inference batches are split into chunks of this many grids.
const PREDICT_CHUNK: usize = 64;

impl Denoiser for ConvDenoiser {
    fn predict_batch(&self, xs: &[LatentGrid], ts: &[usize]) -> Result<Vec<LatentGrid>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        self.check_inputs(xs, ts)?;
        let mut out = Vec::with_capacity(xs.len());
        for (xc, tc) in xs.chunks(PREDICT_CHUNK).zip(ts.chunks(PREDICT_CHUNK)) {
            let refs: Vec<&LatentGrid> = xc.iter().collect();
            let batch = grids_to_cnhw(&refs)?;
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape);
            let x = tape.constant(batch);
            let y = self.forward(&mut tape, &p, x, tc);
            let yt = tape.value(y);
            if !yt.is_finite() {
                return Err(Error::Numeric("denoiser produced a non-finite prediction".into()));
            }
            out.extend(cnhw_to_grids(yt));
        }
        Ok(out)
    }

    fn parameters(&self) -> Option<&ParamStore> {
        Some(&self.params)
    }
}
