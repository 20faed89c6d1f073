//! A small convolutional autoencoder that supplies the latent space.
//!
//! Three stride-2 stages take an `H x W x C_img` image to an
//! `H/8 x W/8 x 4` latent. Latents are whitened per channel with statistics
//! measured on the training set, so unit-variance diffusion noise is on the
//! same scale as the data.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{param_err, shape_err};
use crate::grid::{cnhw_to_grids, grids_to_cnhw};
use crate::math;
use crate::nn::{clip_global_norm, init_normal, Bound, Optimizer, ParamStore, TrainError, TrainSettings};
use crate::{rng, GridShape, LatentGrid, Result, Tensor};

/// Downsampling ratio between image and latent.
pub const SPATIAL_FACTOR: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CodecConfig {
    pub image_channels: usize,
    pub latent_channels: usize,
    /// Channel widths at 1/2, 1/4 and 1/8 resolution.
    pub widths: [usize; 3],
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            image_channels: 1,
            latent_channels: 4,
            widths: [8, 16, 32],
        }
    }
}

#[derive(Clone, Debug)]
pub struct LatentCodec {
    config: CodecConfig,
    params: ParamStore,
    latent_mean: Vec<f64>,
    latent_std: Vec<f64>,
}

/// Per-epoch mean squared reconstruction error.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodecTrainLog {
    pub epoch_mse: Vec<f64>,
}

fn layer_shapes(c: &CodecConfig) -> Vec<(&'static str, [usize; 4])> {
    let [w1, w2, w3] = c.widths;
    let (ic, lc) = (c.image_channels, c.latent_channels);
    vec![
        ("enc0", [w1, ic, 3, 3]),
        ("enc1", [w2, w1, 3, 3]),
        ("enc2", [w3, w2, 3, 3]),
        ("enc_out", [lc, w3, 1, 1]),
        ("dec_in", [w3, lc, 3, 3]),
        ("dec0", [w2, w3, 3, 3]),
        ("dec1", [w1, w2, 3, 3]),
        ("dec_out", [ic, w1, 3, 3]),
    ]
}

impl LatentCodec {
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        let mut r = rng::seeded(seed);
        let mut p = ParamStore::new();
        for (name, s) in layer_shapes(&config) {
            let fan_in = s[1] * s[2] * s[3];
            p.insert(format!("{name}.w"), init_normal(&mut r, &s, fan_in, 1.0))?;
            p.insert(format!("{name}.b"), Tensor::zeros(&[s[0]]))?;
        }
        let lc = config.latent_channels;
        Ok(Self {
            config,
            params: p,
            latent_mean: vec![0.0; lc],
            latent_std: vec![1.0; lc],
        })
    }

    /// Rebuilds a codec from checkpoint records, including the whitening
    /// statistics stored as `latent_mean` and `latent_std`.
    pub fn from_params(config: CodecConfig, store: &ParamStore) -> Result<Self> {
        let lc = config.latent_channels;
        let mut params = ParamStore::new();
        for (name, s) in layer_shapes(&config) {
            for (suffix, shape) in [("w", &s[..]), ("b", &s[..1])] {
                let key = format!("{name}.{suffix}");
                store.expect(&key, shape)?;
                params.insert(key.clone(), store.get(&key).expect("checked").clone())?;
            }
        }
        store.expect("latent_mean", &[lc])?;
        store.expect("latent_std", &[lc])?;
        let latent_std = store.get("latent_std").expect("checked").data().to_vec();
        if latent_std.iter().any(|s| !(*s > 0.0)) {
            return Err(param_err!("latent_std must be positive"));
        }
        Ok(Self {
            config,
            params,
            latent_mean: store.get("latent_mean").expect("checked").data().to_vec(),
            latent_std,
        })
    }

    /// All checkpoint records: trainable weights followed by the whitening
    /// statistics.
    pub fn to_params(&self) -> ParamStore {
        let mut out = self.params.clone();
        let lc = self.config.latent_channels;
        out.insert("latent_mean", Tensor::from_vec(&[lc], self.latent_mean.clone()).expect("len"))
            .expect("unique");
        out.insert("latent_std", Tensor::from_vec(&[lc], self.latent_std.clone()).expect("len"))
            .expect("unique");
        out
    }

    pub fn config(&self) -> CodecConfig {
        self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn spatial_factor(&self) -> usize {
        SPATIAL_FACTOR
    }

    pub fn latent_mean(&self) -> &[f64] {
        &self.latent_mean
    }

    pub fn latent_std(&self) -> &[f64] {
        &self.latent_std
    }

    /// Latent shape for an image shape, or a shape error when the image
    /// does not divide evenly.
    pub fn latent_shape(&self, image: GridShape) -> Result<GridShape> {
        if image.channels != self.config.image_channels {
            return Err(shape_err!(
                "codec expects {} image channels, got {}",
                self.config.image_channels,
                image.channels
            ));
        }
        if image.height % SPATIAL_FACTOR != 0 || image.width % SPATIAL_FACTOR != 0 {
            return Err(shape_err!(
                "{}x{} image is not divisible by {}",
                image.height,
                image.width,
                SPATIAL_FACTOR
            ));
        }
        Ok(GridShape::new(
            image.height / SPATIAL_FACTOR,
            image.width / SPATIAL_FACTOR,
            self.config.latent_channels,
        ))
    }

    fn conv(&self, tape: &mut Tape<'_>, p: &Bound<'_>, x: Var, name: &str, stride: usize) -> Var {
        let k = self.params.get(&format!("{name}.w")).expect("validated").shape()[2];
        tape.conv2d(
            x,
            p.var(&format!("{name}.w")),
            Some(p.var(&format!("{name}.b"))),
            stride,
            k / 2,
        )
    }

    /// Raw (unwhitened) encoder on a `[C, N, H, W]` batch.
    pub fn encoder(&self, tape: &mut Tape<'_>, p: &Bound<'_>, x: Var) -> Var {
        let mut h = x;
        for name in ["enc0", "enc1", "enc2"] {
            h = self.conv(tape, p, h, name, 2);
            h = tape.silu(h);
        }
        self.conv(tape, p, h, "enc_out", 1)
    }

    /// Raw decoder (no clamping) on a `[C, N, h, w]` latent batch.
    pub fn decoder(&self, tape: &mut Tape<'_>, p: &Bound<'_>, z: Var) -> Var {
        let mut h = self.conv(tape, p, z, "dec_in", 1);
        for name in ["dec0", "dec1", "dec_out"] {
            h = tape.silu(h);
            h = tape.upsample2(h);
            h = self.conv(tape, p, h, name, 1);
        }
        h
    }

    fn whiten(&self, grid: LatentGrid) -> LatentGrid {
        let c = self.config.latent_channels;
        let values = grid
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.latent_mean[i % c]) / self.latent_std[i % c])
            .collect();
        LatentGrid::from_raw(grid.shape(), values)
    }

    fn unwhiten(&self, grid: &LatentGrid) -> LatentGrid {
        let c = self.config.latent_channels;
        let values = grid
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.latent_std[i % c] + self.latent_mean[i % c])
            .collect();
        LatentGrid::from_raw(grid.shape(), values)
    }

    fn encode_raw(&self, images: &[LatentGrid]) -> Result<Vec<LatentGrid>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(32) {
            for img in chunk {
                self.latent_shape(img.shape())?;
            }
            let refs: Vec<&LatentGrid> = chunk.iter().collect();
            let batch = grids_to_cnhw(&refs)?;
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape);
            let x = tape.constant(batch);
            let z = self.encoder(&mut tape, &p, x);
            out.extend(cnhw_to_grids(tape.value(z)));
        }
        Ok(out)
    }

    /// Whitened latents of a batch of images.
    pub fn encode_batch(&self, images: &[LatentGrid]) -> Result<Vec<LatentGrid>> {
        Ok(self.encode_raw(images)?.into_iter().map(|z| self.whiten(z)).collect())
    }

    pub fn encode(&self, image: &LatentGrid) -> Result<LatentGrid> {
        Ok(self.encode_batch(core::slice::from_ref(image))?.pop().expect("one latent"))
    }

    /// Images for a batch of whitened latents, clamped to `[-1, 1]`.
    pub fn decode_batch(&self, latents: &[LatentGrid]) -> Result<Vec<LatentGrid>> {
        let lc = self.config.latent_channels;
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(32) {
            for z in chunk {
                if z.channels() != lc {
                    return Err(shape_err!("codec expects {lc} latent channels, got {}", z.channels()));
                }
            }
            let raw: Vec<LatentGrid> = chunk.iter().map(|z| self.unwhiten(z)).collect();
            let refs: Vec<&LatentGrid> = raw.iter().collect();
            let batch = grids_to_cnhw(&refs)?;
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape);
            let z = tape.constant(batch);
            let y = self.decoder(&mut tape, &p, z);
            out.extend(cnhw_to_grids(tape.value(y)).into_iter().map(|g| g.map(|v| v.clamp(-1.0, 1.0))));
        }
        Ok(out)
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<LatentGrid> {
        Ok(self.decode_batch(core::slice::from_ref(latent))?.pop().expect("one image"))
    }

    /// Mean squared error of `decode(encode(x))` against `x`.
    pub fn reconstruction_mse(&self, images: &[LatentGrid]) -> Result<f64> {
        let z = self.encode_batch(images)?;
        let back = self.decode_batch(&z)?;
        let mut total = 0.0;
        let mut n = 0usize;
        for (a, b) in images.iter().zip(&back) {
            total += a.sub(b)?.sum_squares();
            n += a.len();
        }
        Ok(total / n as f64)
    }

    /// Recomputes the whitening statistics from the raw latents of `images`.
    pub fn fit_whitening(&mut self, images: &[LatentGrid]) -> Result<()> {
        let raw = self.encode_raw(images)?;
        let c = self.config.latent_channels;
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0usize;
        for z in &raw {
            for (i, v) in z.values().iter().enumerate() {
                sum[i % c] += v;
                sq[i % c] += v * v;
            }
            count += z.len() / c;
        }
        for ch in 0..c {
            let mean = sum[ch] / count as f64;
            let var = (sq[ch] / count as f64 - mean * mean).max(1e-12);
            self.latent_mean[ch] = mean as f32 as f64;
            self.latent_std[ch] = math::sqrt(var) as f32 as f64;
        }
        Ok(())
    }
}

/// PSNR in dB for images in `[-1, 1]` (peak-to-peak range 2).
pub fn psnr(mse: f64) -> f64 {
    10.0 * math::log10(4.0 / mse)
}

/// Trains the autoencoder on real images by minimising mean squared
/// reconstruction error, then fits the latent whitening statistics.
pub fn train_codec(
    images: &[LatentGrid],
    config: CodecConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(LatentCodec, CodecTrainLog), TrainError> {
    let wrap = |e| TrainError::new(e, None);
    if images.is_empty() {
        return Err(wrap(param_err!("no training images")));
    }
    settings.validate().map_err(wrap)?;
    let mut codec = LatentCodec::init(config, rng::derive_seed(seed, "init")).map_err(wrap)?;
    for img in images {
        codec.latent_shape(img.shape()).map_err(wrap)?;
    }
    let mut opt = Optimizer::new(settings.optimizer, settings.learning_rate);
    let mut r = rng::seeded(rng::derive_seed(seed, "train"));
    let mut log = CodecTrainLog::default();
    let mut step = 0;
    for _ in 0..settings.epochs {
        let order = rng::permutation(&mut r, images.len());
        let mut total = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let refs: Vec<&LatentGrid> = batch.iter().map(|&i| &images[i]).collect();
            let xb = grids_to_cnhw(&refs).map_err(wrap)?;
            let numel = xb.len() as f64;
            let mut grads = {
                let mut tape = Tape::new();
                let p = codec.params.bind(&mut tape);
                let x = tape.constant(xb);
                let z = codec.encoder(&mut tape, &p, x);
                let y = codec.decoder(&mut tape, &p, z);
                let d = tape.sub(y, x);
                let sq = tape.sum_squares(d);
                let loss = tape.scale(sq, 1.0 / numel);
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(TrainError::diverged(step, codec.params.clone()));
                }
                total += value * batch.len() as f64;
                let mut g = tape.backward(loss);
                p.collect(&mut g)
            };
            if let Some(max) = settings.grad_clip {
                clip_global_norm(&mut grads, max);
            }
            let before = codec.params.clone();
            opt.step(&mut codec.params, &grads);
            if !codec.params.all_finite() {
                return Err(TrainError::diverged(step, before));
            }
            step += 1;
        }
        log.epoch_mse.push(total / images.len() as f64);
    }
    codec.params.round_to_f32();
    codec.fit_whitening(images).map_err(wrap)?;
    Ok((codec, log))
}
