use std::collections::BTreeMap;

use lare::config::{Config, Sampler, KEYS, SEED_ENV};
use lare_core::egre::Mode;
use lare_core::nn::OptimizerKind;

fn pairs(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(|l| l.split('#').next().unwrap().trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k.trim().to_string(), v.trim().to_string())
        })
        .collect()
}

#[test]
fn documented_defaults() {
    let c = Config::default();
    assert_eq!((c.t_extract, c.e_ensemble, c.steps), (200, 4, 1000));
    assert_eq!((c.learning_rate, c.batch_size), (1e-4, 48));
    assert_eq!((c.heads, c.head_dim), (4, 8));
    assert_eq!(c.optimizer, OptimizerKind::Sgd);
    assert_eq!(c.mode, Mode::Egre);
    c.validate().unwrap();
}

#[test]
fn serialization_round_trips_key_value_sets() {
    let text = "# toy run\nseed = 11\nmode = concat   # ablation\noptimizer = adam\n\
                generators = ddpm_a, ddim_a, ddpm_b, ddim_b\nbackbone_widths = 8,16,32\nlearning_rate = 0.003\n";
    let c = Config::parse(text).unwrap();
    assert_eq!(c.seed, 11);
    assert_eq!(c.mode, Mode::Concat);
    assert_eq!(c.generators[3].sampler, Sampler::Ddim);
    assert_eq!(c.generators[3].model, "b");
    assert_eq!(c.models(), vec!["a".to_string(), "b".to_string()]);
    let out = c.to_text();
    assert_eq!(pairs(&out).len(), KEYS.len());
    let given = pairs(text);
    let written = pairs(&out);
    for (k, v) in &given {
        let norm: String = v.split(',').map(str::trim).collect::<Vec<_>>().join(",");
        assert_eq!(written[k], norm, "{k}");
    }
    assert_eq!(Config::parse(&out).unwrap(), c);
    assert_eq!(Config::parse(&out).unwrap().hash(), c.hash());
    assert_ne!(Config::default().hash(), c.hash());
}

#[test]
fn bad_configs_are_usage_errors() {
    for text in [
        "nonsense = 1",
        "seed = -1",
        "mode = fancy",
        "optimizer = rmsprop",
        "generators = ddpm_a",
        "generators = gan_a, ddpm_a",
        "backbone_widths = 1,2",
        "just a line",
    ] {
        let r = Config::parse(text).and_then(|c| c.validate());
        let e = r.expect_err(text);
        assert_eq!(e.exit_code(), 2, "{text}: {e}");
    }
    for text in ["t_extract = 1001", "precision = f32", "epochs = 0", "learning_rate = 0", "bench_repeats = 2"] {
        let c = Config::parse(text).unwrap();
        assert_eq!(c.validate().unwrap_err().exit_code(), 2, "{text}");
    }
}

#[test]
fn environment_seed_overrides_the_file() {
    let mut c = Config::parse("seed = 3").unwrap();
    std::env::set_var(SEED_ENV, "99");
    let r = c.apply_env();
    std::env::remove_var(SEED_ENV);
    r.unwrap();
    assert_eq!(c.seed, 99);
    let mut d = Config::parse("seed = 3").unwrap();
    d.apply_env().unwrap();
    assert_eq!(d.seed, 3);
}
