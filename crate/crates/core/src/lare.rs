//! Latent reconstruction error (LaRE): the single-step denoising residual of
//! a clean latent, squared and averaged over an ensemble of noise draws,
//! together with the per-image loss-gap profile and the multi-step
//! inversion-reconstruction baseline.

use alloc::vec;
use alloc::vec::Vec;

use crate::diffusion::{ddim_generate, ddim_invert, forward_diffuse, Denoiser, NoiseSchedule};
use crate::error::param_err;
use crate::{rng, Error, LatentGrid, Result};

/// Default extraction step (of 1000).
pub const DEFAULT_T: usize = 200;
/// Default ensemble size.
pub const DEFAULT_E: usize = 4;

/// An ensemble-averaged squared-residual map with the settings that made it.
#[derive(Clone, Debug, PartialEq)]
pub struct LareMap {
    pub map: LatentGrid,
    pub t: usize,
    pub e: usize,
    pub seed: u64,
}

impl LareMap {
    pub fn values(&self) -> &[f64] {
        self.map.values()
    }

    /// Sum over all elements.
    pub fn total(&self) -> f64 {
        self.map.values().iter().sum()
    }
}

/// `eps - eps_theta(sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, t)`, one denoiser call.
pub fn compute_residual(
    latent: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    let xt = forward_diffuse(latent, t, eps, schedule)?;
    let pred = denoiser.predict(&xt, t)?;
    if !pred.all_finite() {
        return Err(Error::Numeric("denoiser prediction".into()));
    }
    eps.sub(&pred)
}

fn check_settings(t: usize, e: usize, schedule: &NoiseSchedule) -> Result<()> {
    if e == 0 {
        return Err(param_err!("ensemble size must be at least 1"));
    }
    if t == 0 || t > schedule.steps() {
        return Err(param_err!("extraction step {t} outside 1..={}", schedule.steps()));
    }
    Ok(())
}

/// The `e` noise draws used for a given seed, in draw order.
pub fn ensemble_noises(latent: &LatentGrid, e: usize, seed: u64) -> Vec<LatentGrid> {
    let mut r = rng::seeded(seed);
    (0..e).map(|_| rng::normal_grid(&mut r, latent.shape())).collect()
}

/// Averages squared residuals elementwise. Each element's `e` contributions
/// are sorted before summation, so the result is bit-identical under any
/// reordering of the ensemble.
fn average_squares(residuals: &[LatentGrid]) -> LatentGrid {
    let shape = residuals[0].shape();
    let e = residuals.len();
    let mut scratch = vec![0.0; e];
    let values = (0..shape.len())
        .map(|j| {
            for (s, r) in scratch.iter_mut().zip(residuals) {
                let v = r.values()[j];
                *s = v * v;
            }
            scratch.sort_unstable_by(f64::total_cmp);
            scratch.iter().sum::<f64>() / e as f64
        })
        .collect();
    LatentGrid::from_raw(shape, values)
}

/// LaRE from explicit noise draws: `(1/e) sum_i L_i * L_i`, exactly
/// `noises.len()` denoiser calls.
pub fn lare_from_noises(
    latent: &LatentGrid,
    t: usize,
    noises: &[LatentGrid],
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    check_settings(t, noises.len(), schedule)?;
    let noisy = noises
        .iter()
        .map(|eps| forward_diffuse(latent, t, eps, schedule))
        .collect::<Result<Vec<_>>>()?;
    let preds = denoiser.predict_batch(&noisy, &vec![t; noisy.len()])?;
    let residuals = noises
        .iter()
        .zip(&preds)
        .map(|(eps, p)| eps.sub(p))
        .collect::<Result<Vec<_>>>()?;
    let out = average_squares(&residuals);
    if !out.all_finite() {
        return Err(Error::Numeric("LaRE map".into()));
    }
    Ok(out)
}

/// Monte Carlo LaRE with `e` standard-normal draws from `seed`.
pub fn compute_lare(
    latent: &LatentGrid,
    t: usize,
    e: usize,
    seed: u64,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<LareMap> {
    check_settings(t, e, schedule)?;
    let noises = ensemble_noises(latent, e, seed);
    Ok(LareMap {
        map: lare_from_noises(latent, t, &noises, denoiser, schedule)?,
        t,
        e,
        seed,
    })
}

/// [`compute_lare`] over many latents, each with its own seed, batching
/// denoiser calls across latents. Produces the same maps as per-latent calls.
pub fn compute_lare_batch(
    latents: &[(&LatentGrid, u64)],
    t: usize,
    e: usize,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<Vec<LareMap>> {
    check_settings(t, e, schedule)?;
    let mut noisy = Vec::with_capacity(latents.len() * e);
    let mut noises = Vec::with_capacity(latents.len() * e);
    for &(latent, seed) in latents {
        for eps in ensemble_noises(latent, e, seed) {
            noisy.push(forward_diffuse(latent, t, &eps, schedule)?);
            noises.push(eps);
        }
    }
    let preds = denoiser.predict_batch(&noisy, &vec![t; noisy.len()])?;
    let mut out = Vec::with_capacity(latents.len());
    for (i, &(_, seed)) in latents.iter().enumerate() {
        let residuals = (i * e..(i + 1) * e)
            .map(|j| noises[j].sub(&preds[j]))
            .collect::<Result<Vec<_>>>()?;
        let map = average_squares(&residuals);
        if !map.all_finite() {
            return Err(Error::Numeric("LaRE map".into()));
        }
        out.push(LareMap { map, t, e, seed });
    }
    Ok(out)
}

/// One row of the loss-gap profile.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGapRow {
    pub t: usize,
    pub mean_real: f64,
    pub mean_fake: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

/// Per-step mean losses plus the per-image losses behind them
/// (`real_losses[k][i]` is image `i` at `t_grid[k]`).
#[derive(Clone, Debug, PartialEq)]
pub struct LossGapProfile {
    pub rows: Vec<LossGapRow>,
    pub real_losses: Vec<Vec<f64>>,
    pub fake_losses: Vec<Vec<f64>>,
}

fn population_losses(
    latents: &[LatentGrid],
    t: usize,
    seed: u64,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let step_seed = rng::derive_index(seed, t as u64);
    let noises: Vec<LatentGrid> = latents
        .iter()
        .enumerate()
        .map(|(i, x)| rng::normal_grid(&mut rng::seeded(rng::derive_index(step_seed, i as u64)), x.shape()))
        .collect();
    let noisy = latents
        .iter()
        .zip(&noises)
        .map(|(x, eps)| forward_diffuse(x, t, eps, schedule))
        .collect::<Result<Vec<_>>>()?;
    let preds = denoiser.predict_batch(&noisy, &vec![t; noisy.len()])?;
    noises
        .iter()
        .zip(&preds)
        .map(|(eps, p)| Ok(eps.sub(p)?.sum_squares()))
        .collect()
}

/// Mean total squared single-step residual of each population at each step
/// of `t_grid`, one noise draw per image. Image `i` of either population
/// uses the same draw at a given step, so identical populations give
/// identical means.
pub fn loss_gap_profile(
    real: &[LatentGrid],
    fake: &[LatentGrid],
    t_grid: &[usize],
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<LossGapProfile> {
    if real.is_empty() || fake.is_empty() {
        return Err(param_err!("loss-gap populations must be nonempty"));
    }
    let mut profile = LossGapProfile {
        rows: Vec::new(),
        real_losses: Vec::new(),
        fake_losses: Vec::new(),
    };
    for &t in t_grid {
        check_settings(t, 1, schedule)?;
        let rl = population_losses(real, t, seed, denoiser, schedule)?;
        let fl = population_losses(fake, t, seed, denoiser, schedule)?;
        profile.rows.push(LossGapRow {
            t,
            mean_real: rl.iter().sum::<f64>() / rl.len() as f64,
            mean_fake: fl.iter().sum::<f64>() / fl.len() as f64,
            n_real: rl.len(),
            n_fake: fl.len(),
        });
        profile.real_losses.push(rl);
        profile.fake_losses.push(fl);
    }
    Ok(profile)
}

/// Inversion-reconstruction baseline: `(x0 - generate(invert(x0)))^2`
/// elementwise, `2 * steps` denoiser calls per latent.
pub fn dire_feature(
    latent: &LatentGrid,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<LareMap> {
    Ok(dire_feature_batch(core::slice::from_ref(latent), denoiser, schedule, steps)?
        .pop()
        .expect("one map"))
}

/// [`dire_feature`] over a batch; the returned maps carry `t = T`, `e = 0`.
pub fn dire_feature_batch(
    latents: &[LatentGrid],
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Vec<LareMap>> {
    if steps == 0 {
        return Err(param_err!("the inversion baseline needs at least one step"));
    }
    let noise = ddim_invert(latents, denoiser, schedule, steps)?;
    let back = ddim_generate(&noise, denoiser, schedule, steps)?;
    latents
        .iter()
        .zip(&back)
        .map(|(x, y)| {
            Ok(LareMap {
                map: x.sub(y)?.map(|v| v * v),
                t: schedule.steps(),
                e: 0,
                seed: 0,
            })
        })
        .collect()
}

/// Nearest-neighbour upsampling of a map by an integer factor, e.g. to lay a
/// latent-resolution map over its image.
pub fn upsample_nearest(map: &LatentGrid, factor: usize) -> LatentGrid {
    let s = map.shape();
    let out_shape = crate::GridShape::new(s.height * factor, s.width * factor, s.channels);
    let mut values = Vec::with_capacity(out_shape.len());
    for y in 0..out_shape.height {
        for x in 0..out_shape.width {
            for c in 0..s.channels {
                values.push(map.get(y / factor, x / factor, c));
            }
        }
    }
    LatentGrid::from_raw(out_shape, values)
}
