//! Flat `key = value` configuration with `#` comments.
//!
//! Precedence: command-line flags, then `LARE2_SEED` (seed only), then the
//! file, then built-in defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lare_core::diffusion::NoiseSchedule;
use lare_core::egre::Mode;
use lare_core::nn::OptimizerKind;
use sha2::{Digest, Sha256};

use crate::binio::read_file;
use crate::{Error, Result};

pub const SEED_ENV: &str = "LARE2_SEED";

/// A fake-image source: a sampler applied to one trained diffusion model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Generator {
    /// `<sampler>_<model>`, e.g. `ddim_a`.
    pub tag: String,
    pub model: String,
    pub sampler: Sampler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    Ddpm,
    Ddim,
}

impl FromStr for Generator {
    type Err = Error;
    fn from_str(tag: &str) -> Result<Self> {
        let bad = || Error::Usage(format!("generator tag {tag:?} is not <ddpm|ddim>_<model>"));
        let (sampler, model) = tag.split_once('_').ok_or_else(bad)?;
        let sampler = match sampler {
            "ddpm" => Sampler::Ddpm,
            "ddim" => Sampler::Ddim,
            _ => return Err(bad()),
        };
        if model.is_empty() || !model.chars().all(|c| c.is_ascii_alphanumeric()) {
            return Err(bad());
        }
        Ok(Self {
            tag: tag.to_string(),
            model: model.to_string(),
            sampler,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    /// Diffusion length `T`.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_extract: usize,
    pub e_ensemble: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub input_size: usize,
    pub mode: Mode,
    /// Detector training.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Optimiser for every trainer: `sgd` (plain gradient descent) or `adam`.
    pub optimizer: OptimizerKind,
    /// Compute precision; only `f64` is supported.
    pub precision: String,
    pub work_dir: PathBuf,
    /// Real images reserved for training the codec and diffusion models.
    pub pool_size: usize,
    pub reals_per_subset: usize,
    pub fakes_per_subset: usize,
    pub generators: Vec<Generator>,
    /// The diffusion model used for feature extraction.
    pub extractor: String,
    pub codec_epochs: usize,
    pub codec_lr: f64,
    pub diffusion_epochs: usize,
    pub diffusion_lr: f64,
    pub denoiser_width: usize,
    pub ddim_steps: usize,
    pub dire_steps: usize,
    pub backbone_widths: [usize; 3],
    pub lossgap_samples: usize,
    pub bench_images: usize,
    pub bench_repeats: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            t_extract: 200,
            e_ensemble: 4,
            heads: 4,
            head_dim: 8,
            input_size: 64,
            mode: Mode::Egre,
            epochs: 60,
            batch_size: 48,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Sgd,
            precision: "f64".into(),
            work_dir: PathBuf::from("work"),
            pool_size: 512,
            reals_per_subset: 400,
            fakes_per_subset: 400,
            generators: ["ddpm_a", "ddim_a", "ddpm_b"]
                .iter()
                .map(|t| t.parse().expect("valid tag"))
                .collect(),
            extractor: "a".into(),
            codec_epochs: 8,
            codec_lr: 2e-3,
            diffusion_epochs: 200,
            diffusion_lr: 2e-3,
            denoiser_width: 16,
            ddim_steps: 50,
            dire_steps: 20,
            backbone_widths: [32, 32, 32],
            lossgap_samples: 200,
            bench_images: 16,
            bench_repeats: 3,
        }
    }
}

/// Every key, in serialization order.
pub const KEYS: &[&str] = &[
    "seed",
    "T",
    "beta_start",
    "beta_end",
    "t_extract",
    "e_ensemble",
    "heads",
    "head_dim",
    "input_size",
    "mode",
    "epochs",
    "batch_size",
    "learning_rate",
    "optimizer",
    "precision",
    "work_dir",
    "pool_size",
    "reals_per_subset",
    "fakes_per_subset",
    "generators",
    "extractor",
    "codec_epochs",
    "codec_lr",
    "diffusion_epochs",
    "diffusion_lr",
    "denoiser_width",
    "ddim_steps",
    "dire_steps",
    "backbone_widths",
    "lossgap_samples",
    "bench_images",
    "bench_repeats",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("invalid value {value:?} for {key}")))
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "T" => self.steps = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "t_extract" => self.t_extract = parse(key, v)?,
            "e_ensemble" => self.e_ensemble = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "head_dim" => self.head_dim = parse(key, v)?,
            "input_size" => self.input_size = parse(key, v)?,
            "mode" => self.mode = v.parse().map_err(|_| Error::Usage(format!("unknown mode {v:?}")))?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(Error::Usage(format!("unknown optimizer {v:?}; use sgd or adam"))),
                }
            }
            "precision" => self.precision = v.to_string(),
            "work_dir" => self.work_dir = PathBuf::from(v),
            "pool_size" => self.pool_size = parse(key, v)?,
            "reals_per_subset" => self.reals_per_subset = parse(key, v)?,
            "fakes_per_subset" => self.fakes_per_subset = parse(key, v)?,
            "generators" => {
                self.generators = v
                    .split(',')
                    .map(|t| t.trim().parse())
                    .collect::<Result<_>>()?
            }
            "extractor" => self.extractor = v.to_string(),
            "codec_epochs" => self.codec_epochs = parse(key, v)?,
            "codec_lr" => self.codec_lr = parse(key, v)?,
            "diffusion_epochs" => self.diffusion_epochs = parse(key, v)?,
            "diffusion_lr" => self.diffusion_lr = parse(key, v)?,
            "denoiser_width" => self.denoiser_width = parse(key, v)?,
            "ddim_steps" => self.ddim_steps = parse(key, v)?,
            "dire_steps" => self.dire_steps = parse(key, v)?,
            "backbone_widths" => {
                let w: Vec<usize> = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
                self.backbone_widths = w
                    .try_into()
                    .map_err(|_| Error::Usage("backbone_widths takes three values".into()))?;
            }
            "lossgap_samples" => self.lossgap_samples = parse(key, v)?,
            "bench_images" => self.bench_images = parse(key, v)?,
            "bench_repeats" => self.bench_repeats = parse(key, v)?,
            _ => return Err(Error::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "T" => self.steps.to_string(),
            "beta_start" => self.beta_start.to_string(),
            "beta_end" => self.beta_end.to_string(),
            "t_extract" => self.t_extract.to_string(),
            "e_ensemble" => self.e_ensemble.to_string(),
            "heads" => self.heads.to_string(),
            "head_dim" => self.head_dim.to_string(),
            "input_size" => self.input_size.to_string(),
            "mode" => self.mode.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "optimizer" => match self.optimizer {
                OptimizerKind::Sgd => "sgd".into(),
                OptimizerKind::Adam => "adam".into(),
            },
            "precision" => self.precision.clone(),
            "work_dir" => self.work_dir.display().to_string(),
            "pool_size" => self.pool_size.to_string(),
            "reals_per_subset" => self.reals_per_subset.to_string(),
            "fakes_per_subset" => self.fakes_per_subset.to_string(),
            "generators" => join(&self.generators.iter().map(|g| g.tag.as_str()).collect::<Vec<_>>()),
            "extractor" => self.extractor.clone(),
            "codec_epochs" => self.codec_epochs.to_string(),
            "codec_lr" => self.codec_lr.to_string(),
            "diffusion_epochs" => self.diffusion_epochs.to_string(),
            "diffusion_lr" => self.diffusion_lr.to_string(),
            "denoiser_width" => self.denoiser_width.to_string(),
            "ddim_steps" => self.ddim_steps.to_string(),
            "dire_steps" => self.dire_steps.to_string(),
            "backbone_widths" => join(&self.backbone_widths),
            "lossgap_samples" => self.lossgap_samples.to_string(),
            "bench_images" => self.bench_images.to_string(),
            "bench_repeats" => self.bench_repeats.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines over the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
        Self::parse(&text)
    }

    /// Applies the seed environment override, if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    /// Every key on its own line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{k} = {}", self.get(k).expect("listed key")).expect("string write");
        }
        out
    }

    /// SHA-256 of [`Config::to_text`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("T", self.steps),
            ("t_extract", self.t_extract),
            ("e_ensemble", self.e_ensemble),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("input_size", self.input_size),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("pool_size", self.pool_size),
            ("reals_per_subset", self.reals_per_subset),
            ("fakes_per_subset", self.fakes_per_subset),
            ("codec_epochs", self.codec_epochs),
            ("diffusion_epochs", self.diffusion_epochs),
            ("denoiser_width", self.denoiser_width),
            ("ddim_steps", self.ddim_steps),
            ("dire_steps", self.dire_steps),
            ("lossgap_samples", self.lossgap_samples),
            ("bench_images", self.bench_images),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Usage(format!("{k} must be positive")));
            }
        }
        for (k, v) in [
            ("learning_rate", self.learning_rate),
            ("codec_lr", self.codec_lr),
            ("diffusion_lr", self.diffusion_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Usage(format!("{k} must be positive")));
            }
        }
        if self.t_extract > self.steps {
            return Err(Error::Usage(format!("t_extract {} exceeds T {}", self.t_extract, self.steps)));
        }
        if self.ddim_steps > self.steps || self.dire_steps > self.steps {
            return Err(Error::Usage("DDIM step counts cannot exceed T".into()));
        }
        if self.precision != "f64" {
            return Err(Error::Usage(format!("unsupported precision {:?}; only f64", self.precision)));
        }
        if self.bench_repeats < 3 {
            return Err(Error::Usage("bench_repeats must be at least 3".into()));
        }
        if self.input_size % 8 != 0 {
            return Err(Error::Usage("input_size must be a multiple of 8".into()));
        }
        if self.generators.len() < 2 {
            return Err(Error::Usage("at least two generators are needed".into()));
        }
        let mut tags: Vec<&str> = self.generators.iter().map(|g| g.tag.as_str()).collect();
        tags.sort_unstable();
        tags.dedup();
        if tags.len() != self.generators.len() {
            return Err(Error::Usage("duplicate generator tags".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)?)
    }

    /// Diffusion model names referenced by the generators and extractor,
    /// sorted.
    pub fn models(&self) -> Vec<String> {
        let mut m: Vec<String> = self.generators.iter().map(|g| g.model.clone()).collect();
        m.push(self.extractor.clone());
        m.sort();
        m.dedup();
        m
    }
}
