use crate::math;
use alloc::vec::Vec;

use super::{Denoiser, NoiseSchedule};
use crate::error::param_err;
use crate::{rng, Error, GridShape, LatentGrid, Result};

/// Closed-form forward process: `sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`.
///
/// `t = 0` is accepted and returns `x0` unchanged.
pub fn forward_diffuse(
    x0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    schedule: &NoiseSchedule,
) -> Result<LatentGrid> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    x0.axpby(math::sqrt(ab), eps, math::sqrt(1.0 - ab))
}

/// `||eps - eps_theta(x_t, t)||^2` summed over elements.
pub fn denoise_loss(
    x0: &LatentGrid,
    t: usize,
    eps: &LatentGrid,
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let xt = forward_diffuse(x0, t, eps, schedule)?;
    let pred = denoiser.predict(&xt, t)?;
    if !pred.all_finite() {
        return Err(Error::Numeric("denoiser prediction".into()));
    }
    Ok(eps.sub(&pred)?.sum_squares())
}

/// DDPM ancestral sampling of one grid. See [`sample_ddpm_batch`].
pub fn sample_ddpm(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    shape: GridShape,
    seed: u64,
) -> Result<LatentGrid> {
    Ok(sample_ddpm_batch(denoiser, schedule, shape, &[seed])?
        .pop()
        .expect("one sample"))
}

/// DDPM ancestral sampling, one independent generator per seed.
///
/// Starts from `x_T ~ N(0, I)` and applies, for `t = T..1`,
/// `x_{t-1} = (x_t - beta_t / sqrt(1 - ab_t) * eps) / sqrt(alpha_t) + sigma_t z`
/// with `sigma_t^2 = beta_t (1 - ab_{t-1}) / (1 - ab_t)` and no noise at the
/// final step. Results do not depend on how seeds are batched.
pub fn sample_ddpm_batch(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    shape: GridShape,
    seeds: &[u64],
) -> Result<Vec<LatentGrid>> {
    if shape.is_empty() {
        return Err(param_err!("empty sample shape"));
    }
    let mut rngs: Vec<_> = seeds.iter().map(|&s| rng::seeded(s)).collect();
    let mut xs: Vec<LatentGrid> = rngs.iter_mut().map(|r| rng::normal_grid(r, shape)).collect();
    let total = schedule.steps();
    for t in (1..=total).rev() {
        let ts = alloc::vec![t; xs.len()];
        let eps = denoiser.predict_batch(&xs, &ts)?;
        let (alpha, beta, ab) = (schedule.alpha(t), schedule.beta(t), schedule.alpha_bar(t));
        let coef = beta / math::sqrt(1.0 - ab);
        let inv_sqrt_alpha = 1.0 / math::sqrt(alpha);
        let sigma = if t > 1 {
            math::sqrt(beta * (1.0 - schedule.alpha_bar(t - 1)) / (1.0 - ab))
        } else {
            0.0
        };
        for ((x, e), r) in xs.iter_mut().zip(&eps).zip(rngs.iter_mut()) {
            let mut mean = x.axpby(inv_sqrt_alpha, e, -coef * inv_sqrt_alpha)?;
            if t > 1 {
                let z = rng::normal_grid(r, shape);
                mean = mean.axpby(1.0, &z, sigma)?;
            }
            if !mean.all_finite() {
                return Err(Error::Sampling { step: t });
            }
            *x = mean;
        }
    }
    Ok(xs)
}

/// The evenly spaced DDIM grid `tau_0 = 0 < tau_1 < ... < tau_S = T`, with
/// `tau_i = ceil(i * T / S)`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps > total {
        return Err(param_err!("{steps} DDIM steps exceed the {total}-step schedule"));
    }
    Ok((0..=steps)
        .map(|i| if steps == 0 { 0 } else { (i * total).div_ceil(steps) })
        .collect())
}

/// One deterministic DDIM move of every grid from retention `ab_from` to
/// `ab_to` using the noise estimates `eps`.
fn ddim_move(xs: &mut [LatentGrid], eps: &[LatentGrid], ab_from: f64, ab_to: f64) -> Result<()> {
    let (sa, sb) = (math::sqrt(ab_from), math::sqrt(1.0 - ab_from));
    let (ta, tb) = (math::sqrt(ab_to), math::sqrt(1.0 - ab_to));
    for (x, e) in xs.iter_mut().zip(eps) {
        let x0_hat = x.axpby(1.0 / sa, e, -sb / sa)?;
        *x = x0_hat.axpby(ta, e, tb)?;
    }
    Ok(())
}

/// Deterministic DDIM inversion of a batch: walks the grid upward from
/// `tau_0 = 0` to `tau_S = T`, estimating the noise at each target step
/// from the current iterate. `steps = 0` returns the inputs.
pub fn ddim_invert(
    x0: &[LatentGrid],
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Vec<LatentGrid>> {
    let taus = ddim_timesteps(schedule.steps(), steps)?;
    let mut xs = x0.to_vec();
    if xs.is_empty() {
        return Ok(xs);
    }
    for w in taus.windows(2) {
        let (from, to) = (w[0], w[1]);
        let eps = denoiser.predict_batch(&xs, &alloc::vec![to; xs.len()])?;
        ddim_move(&mut xs, &eps, schedule.alpha_bar(from), schedule.alpha_bar(to))?;
        if xs.iter().any(|x| !x.all_finite()) {
            return Err(Error::Numeric(alloc::format!("DDIM inversion at step {to}")));
        }
    }
    Ok(xs)
}

/// Deterministic DDIM generation of a batch: the reverse traversal of
/// [`ddim_invert`]'s grid, from `T` down to 0. Exactly `steps` denoiser
/// calls per grid.
pub fn ddim_generate(
    x_t: &[LatentGrid],
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    steps: usize,
) -> Result<Vec<LatentGrid>> {
    let taus = ddim_timesteps(schedule.steps(), steps)?;
    let mut xs = x_t.to_vec();
    if xs.is_empty() {
        return Ok(xs);
    }
    for w in taus.windows(2).rev() {
        let (to, from) = (w[0], w[1]);
        let eps = denoiser.predict_batch(&xs, &alloc::vec![from; xs.len()])?;
        ddim_move(&mut xs, &eps, schedule.alpha_bar(from), schedule.alpha_bar(to))?;
        if xs.iter().any(|x| !x.all_finite()) {
            return Err(Error::Numeric(alloc::format!("DDIM generation at step {from}")));
        }
    }
    Ok(xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::CountingDenoiser;
    use crate::Tensor;

    pub(crate) struct Zero;
    impl Denoiser for Zero {
        fn predict_batch(&self, xs: &[LatentGrid], _: &[usize]) -> Result<Vec<LatentGrid>> {
            Ok(xs.iter().map(|x| LatentGrid::zeros(x.shape())).collect())
        }
    }

    /// Exact noise predictor for data concentrated on a single point `c`.
    struct PointMass {
        c: LatentGrid,
        schedule: NoiseSchedule,
    }
    impl Denoiser for PointMass {
        fn predict_batch(&self, xs: &[LatentGrid], ts: &[usize]) -> Result<Vec<LatentGrid>> {
            xs.iter()
                .zip(ts)
                .map(|(x, &t)| {
                    let ab = self.schedule.alpha_bar(t);
                    let s = 1.0 / math::sqrt(1.0 - ab);
                    x.axpby(s, &self.c, -math::sqrt(ab) * s)
                })
                .collect()
        }
    }

    struct Offset(f64);
    impl Denoiser for Offset {
        fn predict_batch(&self, xs: &[LatentGrid], _: &[usize]) -> Result<Vec<LatentGrid>> {
            Ok(xs.iter().map(|x| LatentGrid::filled(x.shape(), self.0)).collect())
        }
    }

    fn scalar(v: f64) -> LatentGrid {
        LatentGrid::new(GridShape::new(1, 1, 1), alloc::vec![v]).unwrap()
    }

    #[test]
    fn forward_diffuse_hand_values() {
        // ab = 0.25 via a one-step schedule with beta = 0.75
        let s = NoiseSchedule::from_betas(alloc::vec![0.75]).unwrap();
        let out = forward_diffuse(&scalar(2.0), 1, &scalar(1.0), &s).unwrap();
        assert!((out.values()[0] - 1.8660254037844386).abs() < 1e-12);
        let same = forward_diffuse(&scalar(2.0), 0, &scalar(1.0), &s).unwrap();
        assert_eq!(same.values()[0], 2.0);
        assert!(forward_diffuse(&scalar(2.0), 2, &scalar(1.0), &s).is_err());
    }

    #[test]
    fn forward_diffuse_of_zero_is_scaled_noise() {
        let s = NoiseSchedule::standard();
        let shape = GridShape::new(2, 2, 2);
        let eps = rng::normal_grid(&mut rng::seeded(1), shape);
        let out = forward_diffuse(&LatentGrid::zeros(shape), 300, &eps, &s).unwrap();
        let k = math::sqrt(1.0 - s.alpha_bar(300));
        for (o, e) in out.values().iter().zip(eps.values()) {
            assert_eq!(*o, k * e);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let s = NoiseSchedule::standard();
        let a = LatentGrid::zeros(GridShape::new(2, 2, 1));
        let b = LatentGrid::zeros(GridShape::new(2, 2, 2));
        assert!(matches!(forward_diffuse(&a, 1, &b, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_of_constant_offset_is_n_c_squared() {
        let s = NoiseSchedule::standard();
        let shape = GridShape::new(3, 3, 2);
        let x0 = rng::normal_grid(&mut rng::seeded(2), shape);
        let eps = LatentGrid::zeros(shape);
        let loss = denoise_loss(&x0, 10, &eps, &Offset(0.5), &s).unwrap();
        assert!((loss - 18.0 * 0.25).abs() < 1e-12);
    }

    #[test]
    fn ddpm_single_step_with_zero_denoiser_rescales_the_start_noise() {
        let s = NoiseSchedule::linear(1, 0.1, 0.1).unwrap();
        let shape = GridShape::new(2, 2, 1);
        let out = sample_ddpm(&Zero, &s, shape, 9).unwrap();
        let start = rng::normal_grid(&mut rng::seeded(9), shape);
        for (o, x) in out.values().iter().zip(start.values()) {
            assert!((o - x / math::sqrt(0.9)).abs() < 1e-15);
        }
    }

    #[test]
    fn ddpm_is_deterministic_and_batch_independent() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
        let shape = GridShape::new(2, 2, 1);
        let d = PointMass {
            c: LatentGrid::filled(shape, 0.3),
            schedule: s.clone(),
        };
        let a = sample_ddpm(&d, &s, shape, 4).unwrap();
        let b = sample_ddpm_batch(&d, &s, shape, &[3, 4]).unwrap();
        assert_eq!(a, b[1]);
    }

    #[test]
    fn ddim_grid_is_even_and_ends_at_t() {
        assert_eq!(ddim_timesteps(1000, 20).unwrap()[1], 50);
        assert_eq!(*ddim_timesteps(1000, 20).unwrap().last().unwrap(), 1000);
        assert_eq!(ddim_timesteps(10, 3).unwrap(), alloc::vec![0, 4, 7, 10]);
        assert_eq!(ddim_timesteps(10, 0).unwrap(), alloc::vec![0]);
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn ddim_zero_steps_is_identity_and_calls_are_counted() {
        let s = NoiseSchedule::standard();
        let x = rng::normal_grid(&mut rng::seeded(1), GridShape::new(2, 2, 2));
        let d = CountingDenoiser::new(Zero);
        assert_eq!(ddim_invert(&[x.clone()], &d, &s, 0).unwrap()[0], x);
        assert_eq!(ddim_generate(&[x.clone()], &d, &s, 0).unwrap()[0], x);
        assert_eq!(d.calls(), 0);
        let a = ddim_generate(&[x.clone()], &d, &s, 20).unwrap();
        assert_eq!(d.calls(), 20);
        let b = ddim_generate(&[x], &d, &s, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ddim_round_trip_is_exact_for_a_point_mass_oracle() {
        let s = NoiseSchedule::standard();
        let shape = GridShape::new(2, 2, 2);
        let c = rng::normal_grid(&mut rng::seeded(5), shape);
        let d = PointMass {
            c: c.clone(),
            schedule: s.clone(),
        };
        let inv = ddim_invert(&[c.clone()], &d, &s, 20).unwrap();
        let back = ddim_generate(&inv, &d, &s, 20).unwrap();
        assert!(back[0].sub(&c).unwrap().sum_squares() < 1e-18);
        let _ = Tensor::zeros(&[1]);
    }

    proptest::proptest! {
        #[test]
        fn forward_diffuse_linearity_identity(
            a in -3.0f64..3.0, b in -3.0f64..3.0, t in 1usize..=1000,
            seed in 0u64..1000,
        ) {
            let s = NoiseSchedule::standard();
            let shape = GridShape::new(2, 2, 1);
            let mut r = rng::seeded(seed);
            let x = rng::normal_grid(&mut r, shape);
            let y = rng::normal_grid(&mut r, shape);
            let e = rng::normal_grid(&mut r, shape);
            let lhs = forward_diffuse(&x.axpby(a, &y, b).unwrap(), t, &e, &s).unwrap();
            let fx = forward_diffuse(&x, t, &e, &s).unwrap();
            let fy = forward_diffuse(&y, t, &e, &s).unwrap();
            let k = math::sqrt(1.0 - s.alpha_bar(t));
            for i in 0..4 {
                let rhs = a * fx.values()[i] + b * fy.values()[i] - (a + b - 1.0) * k * e.values()[i];
                proptest::prop_assert!((lhs.values()[i] - rhs).abs() < 1e-12);
            }
        }

        #[test]
        fn loss_is_nonnegative_and_zero_only_for_exact_prediction(
            c in -2.0f64..2.0, t in 1usize..=1000,
        ) {
            let s = NoiseSchedule::standard();
            let shape = GridShape::new(2, 2, 1);
            let x0 = LatentGrid::filled(shape, 0.7);
            let eps = LatentGrid::filled(shape, c);
            let loss = denoise_loss(&x0, t, &eps, &Offset(c), &s).unwrap();
            proptest::prop_assert_eq!(loss, 0.0);
            let off = denoise_loss(&x0, t, &eps, &Offset(c + 0.1), &s).unwrap();
            proptest::prop_assert!(off > 0.0);
        }
    }
}
