use lare_core::codec::{train_codec, CodecConfig, LatentCodec};
use lare_core::forge::{synth_real, RealFamily};
use lare_core::nn::{OptimizerKind, TrainSettings};
use lare_core::{rng, GridShape};
use proptest::prelude::*;

fn settings(epochs: usize, lr: f64) -> TrainSettings {
    TrainSettings {
        epochs,
        batch_size: 16,
        learning_rate: lr,
        optimizer: OptimizerKind::Adam,
        grad_clip: Some(1.0),
    }
}

#[test]
fn second_epoch_reconstructs_better() {
    let imgs = synth_real(64, 1, GridShape::new(64, 64, 1), &RealFamily::default());
    let (_, log) = train_codec(&imgs, CodecConfig::default(), &settings(2, 2e-3), 3).unwrap();
    assert!(log.epoch_mse[1] < log.epoch_mse[0], "{:?}", log.epoch_mse);
}

#[test]
fn training_is_deterministic_and_inert_at_zero_learning_rate() {
    let imgs = synth_real(8, 1, GridShape::new(64, 64, 1), &RealFamily::default());
    let (a, _) = train_codec(&imgs, CodecConfig::default(), &settings(1, 2e-3), 3).unwrap();
    let (b, _) = train_codec(&imgs, CodecConfig::default(), &settings(1, 2e-3), 3).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(a.latent_std(), b.latent_std());
    let (z, _) = train_codec(&imgs, CodecConfig::default(), &settings(1, 0.0), 3).unwrap();
    let init = LatentCodec::init(CodecConfig::default(), rng::derive_seed(3, "init")).unwrap();
    let rounded: Vec<Vec<f64>> = init
        .params()
        .tensors()
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f32 as f64).collect())
        .collect();
    let got: Vec<Vec<f64>> = z.params().tensors().iter().map(|t| t.data().to_vec()).collect();
    assert_eq!(got, rounded);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn shape_contract_holds_over_the_corpus(seed in any::<u64>(), side in 1usize..5) {
        let codec = LatentCodec::init(CodecConfig::default(), 1).unwrap();
        let shape = GridShape::new(16 * side, 8 * side, 1);
        let img = &synth_real(1, seed, shape, &RealFamily::default())[0];
        let z = codec.encode(img).unwrap();
        prop_assert_eq!(z.shape(), GridShape::new(2 * side, side, 4));
        let x = codec.decode(&z).unwrap();
        prop_assert_eq!(x.shape(), shape);
        prop_assert!(x.values().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(codec.encode(img).unwrap(), z);
    }
}
