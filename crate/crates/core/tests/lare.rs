use lare_core::diffusion::{ConvDenoiser, DenoiserConfig, NoiseSchedule};
use lare_core::lare::{compute_lare, DEFAULT_E, DEFAULT_T};
use lare_core::{rng, GridShape, LatentGrid};

/// Mean over elements of the per-element variance of the LaRE map across
/// `reseeds` ensemble seeds.
fn mean_element_variance(latent: &LatentGrid, e: usize, reseeds: u64, model: &ConvDenoiser) -> f64 {
    let s = NoiseSchedule::standard();
    let maps: Vec<Vec<f64>> = (0..reseeds)
        .map(|k| {
            compute_lare(latent, DEFAULT_T, e, 10_000 + k, model, &s)
                .unwrap()
                .map
                .into_values()
        })
        .collect();
    let n = maps.len() as f64;
    let len = maps[0].len();
    (0..len)
        .map(|i| {
            let m = maps.iter().map(|v| v[i]).sum::<f64>() / n;
            maps.iter().map(|v| (v[i] - m) * (v[i] - m)).sum::<f64>() / (n - 1.0)
        })
        .sum::<f64>()
        / len as f64
}

fn setup() -> (LatentGrid, ConvDenoiser) {
    let latent = rng::normal_grid(&mut rng::seeded(1), GridShape::new(8, 8, 4));
    (latent, ConvDenoiser::init(DenoiserConfig::default(), 2).unwrap())
}

#[test]
fn defaults_match_the_documented_settings() {
    assert_eq!((DEFAULT_T, DEFAULT_E), (200, 4));
}

#[test]
fn ensemble_variance_scales_as_one_over_e() {
    let (latent, model) = setup();
    let v1 = mean_element_variance(&latent, 1, 50, &model);
    let v16 = mean_element_variance(&latent, 16, 50, &model);
    let ratio = v16 / (v1 / 16.0);
    assert!((1.0 / 1.5..=1.5).contains(&ratio), "ratio {ratio}");

    let v4 = mean_element_variance(&latent, 4, 50, &model);
    let v64 = mean_element_variance(&latent, 64, 50, &model);
    assert!(v64 < v4);
    let ratio = v64 / (v4 / 16.0);
    assert!((1.0 / 1.5..=1.5).contains(&ratio), "ratio {ratio}");
}
