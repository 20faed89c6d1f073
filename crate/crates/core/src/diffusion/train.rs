use crate::math;
use alloc::vec::Vec;

use rand::Rng;

use super::{ConvDenoiser, DenoiserConfig, NoiseSchedule};
use crate::autograd::Tape;
use crate::error::param_err;
use crate::grid::grids_to_cnhw;
use crate::nn::{clip_global_norm, Optimizer, TrainError, TrainSettings};
use crate::{rng, LatentGrid, Result};

/// Per-epoch mean of the per-sample noise-prediction loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DiffusionTrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Trains a [`ConvDenoiser`] on clean latents with the noise-prediction
/// objective. Each sample draws `t` uniformly from `1..=T` and fresh
/// standard-normal noise; the batch loss is the mean over samples of the
/// summed squared error.
pub fn train_diffusion(
    latents: &[LatentGrid],
    schedule: &NoiseSchedule,
    config: DenoiserConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(ConvDenoiser, DiffusionTrainLog), TrainError> {
    if latents.is_empty() {
        return Err(TrainError::new(param_err!("no training latents"), None));
    }
    settings.validate().map_err(|e| TrainError::new(e, None))?;
    let shape = latents[0].shape();
    let mut model =
        ConvDenoiser::init(config, rng::derive_seed(seed, "init")).map_err(|e| TrainError::new(e, None))?;
    let mut opt = Optimizer::new(settings.optimizer, settings.learning_rate);
    let mut r = rng::seeded(rng::derive_seed(seed, "train"));
    let mut log = DiffusionTrainLog::default();
    let steps = schedule.steps();
    let mut step = 0;

    for _epoch in 0..settings.epochs {
        let order = rng::permutation(&mut r, latents.len());
        let mut total = 0.0;
        for batch in order.chunks(settings.batch_size) {
            let mut noisy = Vec::with_capacity(batch.len());
            let mut noises = Vec::with_capacity(batch.len());
            let mut ts = Vec::with_capacity(batch.len());
            for &i in batch {
                let t = r.random_range(1..=steps);
                let eps = rng::normal_grid(&mut r, shape);
                let ab = schedule.alpha_bar(t);
                let xt = latents[i]
                    .axpby(math::sqrt(ab), &eps, math::sqrt(1.0 - ab))
                    .map_err(|e| TrainError::new(e, None))?;
                noisy.push(xt);
                noises.push(eps);
                ts.push(t);
            }
            let nref: Vec<&LatentGrid> = noisy.iter().collect();
            let eref: Vec<&LatentGrid> = noises.iter().collect();
            let xb = grids_to_cnhw(&nref).map_err(|e| TrainError::new(e, None))?;
            let eb = grids_to_cnhw(&eref).map_err(|e| TrainError::new(e, None))?;

            let mut grads = {
                let mut tape = Tape::new();
                let p = model.params().bind(&mut tape);
                let x = tape.constant(xb);
                let e = tape.constant(eb);
                let pred = model.forward(&mut tape, &p, x, &ts);
                let diff = tape.sub(e, pred);
                let sq = tape.sum_squares(diff);
                let loss = tape.scale(sq, 1.0 / batch.len() as f64);
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(TrainError::diverged(step, model.params().clone()));
                }
                total += value * batch.len() as f64;
                let mut g = tape.backward(loss);
                p.collect(&mut g)
            };
            if let Some(max) = settings.grad_clip {
                clip_global_norm(&mut grads, max);
            }
            let before = model.params().clone();
            opt.step(model.params_mut(), &grads);
            if !model.params().all_finite() {
                return Err(TrainError::diverged(step, before));
            }
            step += 1;
        }
        log.epoch_losses.push(total / latents.len() as f64);
    }
    model.params_mut().round_to_f32();
    Ok((model, log))
}
