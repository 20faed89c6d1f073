//! The end-to-end pipeline over a work directory.
//!
//! Layout under the work directory:
//!
//! ```text
//! images/pool/      reals used only to train the codec and diffusion models
//! images/real/      reals for the benchmark subsets
//! images/<tag>/     fakes from generator <tag>
//! manifest.jsonl
//! checkpoints/      codec.ck, diffusion_<model>.ck, detector_<features>_<mode>_<tag>.ck
//! cache/            lare.ft, dire.ft
//! reports/          CSV reports and overlay images
//! meta/<command>.json
//! ```
//!
//! Every step derives its randomness from the config seed and a fixed label,
//! and batches work in fixed-size chunks, so artifacts do not depend on the
//! worker count.

use std::path::{Path, PathBuf};
use std::time::Instant;

use lare_core::codec::{train_codec, CodecConfig, LatentCodec};
use lare_core::diffusion::{
    ddim_generate, sample_ddpm_batch, train_diffusion, ConvDenoiser, DenoiserConfig, NoiseSchedule,
};
use lare_core::egre::{train_detector, Detector, DetectorConfig, DetectorSample, EgreConfig, Mode};
use lare_core::forge::{synth_real, RealFamily};
use lare_core::lare::{compute_lare_batch, dire_feature_batch, loss_gap_profile, upsample_nearest, LossGapProfile};
use lare_core::metrics::{acc_ap, bootstrap_positive_fraction, Cell, EvalMatrix, ScoredSet};
use lare_core::nn::TrainSettings;
use lare_core::{rng, GridShape, LatentGrid};
use rayon::prelude::*;
use serde::Serialize;

use crate::bench::{bench_extraction, to_rows, Timing};
use crate::cache::{CacheRecord, FeatureCache};
use crate::config::{Config, Sampler};
use crate::manifest::{Manifest, Record, Split};
use crate::report::{self, LossGapRow, MatrixRow, SweepRow};
use crate::{checkpoint, image_io, Error, Result};

/// Work items per parallel chunk. Fixed so that batching, and with it every
/// floating-point result, is independent of the thread count.
const CHUNK: usize = 32;

/// Which cached feature a detector consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Features {
    Lare,
    Dire,
}

impl Features {
    pub fn as_str(self) -> &'static str {
        match self {
            Features::Lare => "lare",
            Features::Dire => "dire",
        }
    }
}

impl std::str::FromStr for Features {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lare" => Ok(Features::Lare),
            "dire" => Ok(Features::Dire),
            _ => Err(Error::Usage(format!("unknown feature kind {s:?}"))),
        }
    }
}

#[derive(Serialize)]
struct Metadata<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    versions: Versions,
    conventions: Conventions,
}

#[derive(Serialize)]
struct Versions {
    lare: &'static str,
    checkpoint_format: &'static str,
    cache_format: &'static str,
    image_format: &'static str,
}

#[derive(Serialize)]
struct Conventions {
    positive_class: &'static str,
    average_precision: &'static str,
    decision_threshold: f64,
    augmentation: &'static str,
}

/// Result of the loss-gap experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGap {
    pub profile: LossGapProfile,
    /// Per step, the fraction of bootstrap replicates with a positive
    /// real-minus-fake gap.
    pub bootstrap_positive: Vec<f64>,
}

pub struct Pipeline {
    config: Config,
    root: PathBuf,
    quiet: bool,
}

fn seeds_for(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| rng::derive_index(base, i)).collect()
}

fn par_chunks<T: Sync, U: Send>(
    items: &[T],
    f: impl Fn(&[T]) -> lare_core::Result<Vec<U>> + Sync + Send,
) -> Result<Vec<U>> {
    let parts: Vec<lare_core::Result<Vec<U>>> = items.par_chunks(CHUNK).map(f).collect();
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

impl Pipeline {
    pub fn new(config: Config, quiet: bool) -> Result<Self> {
        config.validate()?;
        let root = config.work_dir.clone();
        Ok(Self { config, root, quiet })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn seed(&self, label: &str) -> u64 {
        rng::derive_seed(self.config.seed, label)
    }

    fn image_shape(&self) -> GridShape {
        GridShape::new(self.config.input_size, self.config.input_size, 1)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.path("manifest.jsonl")
    }

    pub fn codec_path(&self) -> PathBuf {
        self.path("checkpoints/codec.ck")
    }

    pub fn diffusion_path(&self, model: &str) -> PathBuf {
        self.path(&format!("checkpoints/diffusion_{model}.ck"))
    }

    pub fn detector_path(&self, features: Features, mode: Mode, subset: &str) -> PathBuf {
        self.path(&format!("checkpoints/detector_{}_{mode}_{subset}.ck", features.as_str()))
    }

    pub fn cache_path(&self, features: Features) -> PathBuf {
        self.path(&format!("cache/{}.ft", features.as_str()))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.path(&format!("reports/{name}"))
    }

    fn pool_path(&self, i: usize) -> String {
        format!("images/pool/pool_{i:05}.limg")
    }

    fn real_path(&self, i: usize) -> String {
        format!("images/real/real_{i:05}.limg")
    }

    fn fake_path(&self, tag: &str, i: usize) -> String {
        format!("images/{tag}/{tag}_{i:05}.limg")
    }

    /// Writes `meta/<command>.json`: config hash, seed, versions and the
    /// evaluation conventions.
    pub fn write_metadata(&self, command: &str) -> Result<()> {
        let meta = Metadata {
            command,
            config_hash: self.config.hash(),
            seed: self.config.seed,
            versions: Versions {
                lare: env!("CARGO_PKG_VERSION"),
                checkpoint_format: "LARE2CK1",
                cache_format: "LAREFT1",
                image_format: "LIMG1",
            },
            conventions: Conventions {
                positive_class: "fake",
                average_precision: "non-interpolated; ties ranked by ascending image id",
                decision_threshold: 0.5,
                augmentation: "none",
            },
        };
        let mut text = serde_json::to_string_pretty(&meta).expect("plain struct");
        text.push('\n');
        crate::binio::write_file(&self.path(&format!("meta/{command}.json")), text.as_bytes())?;
        let config_copy = self.path("meta/config.txt");
        crate::binio::write_file(&config_copy, self.config.to_text().as_bytes())
    }

    fn read_images(&self, rels: &[String]) -> Result<Vec<LatentGrid>> {
        let out: Vec<Result<LatentGrid>> = rels.par_iter().map(|r| image_io::read(&self.root.join(r))).collect();
        out.into_iter().collect()
    }

    fn write_images(&self, rels: &[String], images: &[LatentGrid]) -> Result<()> {
        rels.par_iter()
            .zip(images)
            .map(|(r, img)| image_io::write(&self.root.join(r), img))
            .collect()
    }

    /// Synthesises the training pool and the benchmark reals.
    pub fn forge(&self) -> Result<()> {
        let c = &self.config;
        let family = RealFamily::default();
        let pool = synth_real(c.pool_size, self.seed("pool"), self.image_shape(), &family);
        let rels: Vec<String> = (0..pool.len()).map(|i| self.pool_path(i)).collect();
        self.write_images(&rels, &pool)?;
        let n = c.reals_per_subset * c.generators.len();
        let reals = synth_real(n, self.seed("reals"), self.image_shape(), &family);
        let rels: Vec<String> = (0..n).map(|i| self.real_path(i)).collect();
        self.write_images(&rels, &reals)?;
        self.say(format!("forged {} pool and {n} benchmark reals", pool.len()));
        self.write_metadata("forge")
    }

    fn pool(&self) -> Result<Vec<LatentGrid>> {
        let rels: Vec<String> = (0..self.config.pool_size).map(|i| self.pool_path(i)).collect();
        self.read_images(&rels)
    }

    pub fn train_codec(&self) -> Result<LatentCodec> {
        let c = &self.config;
        let settings = TrainSettings {
            epochs: c.codec_epochs,
            batch_size: 16,
            learning_rate: c.codec_lr,
            optimizer: c.optimizer,
            grad_clip: Some(1.0),
        };
        let pool = self.pool()?;
        let (codec, _) = train_codec(&pool, CodecConfig::default(), &settings, self.seed("codec"))?;
        let mse = codec.reconstruction_mse(&pool)?;
        self.say(format!(
            "codec: pool reconstruction mse {mse:.5} ({:.1} dB)",
            lare_core::codec::psnr(mse)
        ));
        checkpoint::write(&self.codec_path(), &checkpoint::codec_store(&codec))?;
        self.write_metadata("train-codec")?;
        Ok(codec)
    }

    pub fn load_codec(&self) -> Result<LatentCodec> {
        let path = self.codec_path();
        checkpoint::codec_from_store(&checkpoint::read(&path)?, &path)
    }

    fn encode(&self, codec: &LatentCodec, images: &[LatentGrid]) -> Result<Vec<LatentGrid>> {
        par_chunks(images, |c| codec.encode_batch(c))
    }

    /// Trains the named diffusion models (all configured ones if `only` is
    /// `None`) on the pool's latents.
    pub fn train_diffusion(&self, only: Option<&str>) -> Result<()> {
        let c = &self.config;
        let models = c.models();
        let selected: Vec<&String> = match only {
            Some(m) => {
                let found = models.iter().find(|x| x.as_str() == m);
                vec![found.ok_or_else(|| Error::Usage(format!("no generator uses model {m:?}")))?]
            }
            None => models.iter().collect(),
        };
        let codec = self.load_codec()?;
        let latents = self.encode(&codec, &self.pool()?)?;
        let schedule = c.schedule()?;
        let settings = TrainSettings {
            epochs: c.diffusion_epochs,
            batch_size: 32,
            learning_rate: c.diffusion_lr,
            optimizer: c.optimizer,
            grad_clip: Some(1.0),
        };
        for m in selected {
            let cfg = DenoiserConfig {
                width: c.denoiser_width,
                ..DenoiserConfig::default()
            };
            let (model, log) = train_diffusion(&latents, &schedule, cfg, &settings, self.seed(&format!("diffusion_{m}")))?;
            self.say(format!(
                "diffusion {m}: epoch loss {:.2} -> {:.2}",
                log.epoch_losses[0],
                log.epoch_losses.last().expect("at least one epoch")
            ));
            checkpoint::write(&self.diffusion_path(m), &checkpoint::denoiser_store(&model))?;
        }
        self.write_metadata("train-diffusion")
    }

    pub fn load_diffusion(&self, model: &str) -> Result<ConvDenoiser> {
        let path = self.diffusion_path(model);
        checkpoint::denoiser_from_store(&checkpoint::read(&path)?, &path)
    }

    /// Samples latents from one generator.
    pub fn sample(&self, tag: &str, count: usize, schedule: &NoiseSchedule) -> Result<Vec<LatentGrid>> {
        let g = self
            .config
            .generators
            .iter()
            .find(|g| g.tag == tag)
            .ok_or_else(|| Error::Usage(format!("unknown generator {tag:?}")))?;
        let model = self.load_diffusion(&g.model)?;
        let shape = GridShape::new(self.config.input_size / 8, self.config.input_size / 8, 4);
        let seeds = seeds_for(self.seed(&format!("gen_{tag}")), count);
        let steps = self.config.ddim_steps;
        par_chunks(&seeds, |chunk| match g.sampler {
            Sampler::Ddpm => sample_ddpm_batch(&model, schedule, shape, chunk),
            Sampler::Ddim => {
                let xt: Vec<LatentGrid> = chunk
                    .iter()
                    .map(|&s| rng::normal_grid(&mut rng::seeded(s), shape))
                    .collect();
                ddim_generate(&xt, &model, schedule, steps)
            }
        })
    }

    /// Generates every subset's fakes, pairs each subset with its own reals
    /// and writes the manifest with 80/10/10 splits.
    pub fn build_subsets(&self) -> Result<Manifest> {
        let c = &self.config;
        let schedule = c.schedule()?;
        let codec = self.load_codec()?;
        let mut records = Vec::new();
        for (k, g) in c.generators.iter().enumerate() {
            let latents = self.sample(&g.tag, c.fakes_per_subset, &schedule)?;
            let images = par_chunks(&latents, |z| codec.decode_batch(z))?;
            let rels: Vec<String> = (0..images.len()).map(|i| self.fake_path(&g.tag, i)).collect();
            self.write_images(&rels, &images)?;
            let reals = (0..c.reals_per_subset).map(|i| {
                (
                    format!("{}/real_{i:05}", g.tag),
                    self.real_path(k * c.reals_per_subset + i),
                    0u8,
                    "real".to_string(),
                    split_of(i, c.reals_per_subset),
                )
            });
            let fakes = rels.iter().enumerate().map(|(i, rel)| {
                (
                    format!("{}/fake_{i:05}", g.tag),
                    rel.clone(),
                    1u8,
                    g.tag.clone(),
                    split_of(i, c.fakes_per_subset),
                )
            });
            for (id, path, label, generator, split) in reals.chain(fakes) {
                records.push(Record {
                    id,
                    path,
                    label,
                    generator,
                    split,
                });
            }
            self.say(format!("generated {} fakes for {}", images.len(), g.tag));
        }
        let manifest = Manifest { records };
        manifest.validate()?;
        manifest.write(&self.manifest_path())?;
        self.write_metadata("gen")?;
        Ok(manifest)
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        Manifest::read(&self.manifest_path())
    }

    /// Codec latents of every manifest image, in manifest order.
    fn manifest_latents(&self, manifest: &Manifest, codec: &LatentCodec) -> Result<Vec<LatentGrid>> {
        let rels: Vec<String> = manifest.records.iter().map(|r| r.path.clone()).collect();
        self.encode(codec, &self.read_images(&rels)?)
    }

    /// LaRE maps of every manifest image with step `t` and ensemble `e`. Each
    /// image's noise is seeded from its id.
    pub fn lare_cache(&self, manifest: &Manifest, t: usize, e: usize) -> Result<FeatureCache> {
        let codec = self.load_codec()?;
        let model = self.load_diffusion(&self.config.extractor)?;
        let schedule = self.config.schedule()?;
        let latents = self.manifest_latents(manifest, &codec)?;
        let seeds: Vec<u64> = manifest
            .records
            .iter()
            .map(|r| self.seed(&format!("lare/{}", r.id)))
            .collect();
        let items: Vec<(&LatentGrid, u64)> = latents.iter().zip(seeds).collect();
        let maps = par_chunks(&items, |chunk| compute_lare_batch(chunk, t, e, &model, &schedule))?;
        let mut cache = FeatureCache::new();
        for (r, m) in manifest.records.iter().zip(maps) {
            cache.push(CacheRecord {
                id: r.id.clone(),
                map: m.map,
                t,
                e,
            })?;
        }
        Ok(cache)
    }

    pub fn extract(&self, t: Option<usize>, e: Option<usize>) -> Result<FeatureCache> {
        let t = t.unwrap_or(self.config.t_extract);
        let e = e.unwrap_or(self.config.e_ensemble);
        let manifest = self.load_manifest()?;
        let start = Instant::now();
        let cache = self.lare_cache(&manifest, t, e)?;
        self.say(format!(
            "extracted {} LaRE maps (t={t}, e={e}) in {:.1}s",
            cache.len(),
            start.elapsed().as_secs_f64()
        ));
        cache.write(&self.cache_path(Features::Lare))?;
        self.write_metadata("extract")?;
        Ok(cache)
    }

    /// Inversion-reconstruction maps with `steps` DDIM steps each way.
    pub fn extract_dire(&self, steps: Option<usize>) -> Result<FeatureCache> {
        let steps = steps.unwrap_or(self.config.dire_steps);
        let manifest = self.load_manifest()?;
        let codec = self.load_codec()?;
        let model = self.load_diffusion(&self.config.extractor)?;
        let schedule = self.config.schedule()?;
        let latents = self.manifest_latents(&manifest, &codec)?;
        let maps = par_chunks(&latents, |chunk| dire_feature_batch(chunk, &model, &schedule, steps))?;
        let mut cache = FeatureCache::new();
        for (r, m) in manifest.records.iter().zip(maps) {
            cache.push(CacheRecord {
                id: r.id.clone(),
                map: m.map,
                t: steps,
                e: 0,
            })?;
        }
        cache.write(&self.cache_path(Features::Dire))?;
        self.say(format!("extracted {} inversion maps ({steps} steps)", cache.len()));
        self.write_metadata("extract-dire")?;
        Ok(cache)
    }

    pub fn load_cache(&self, features: Features) -> Result<FeatureCache> {
        FeatureCache::read(&self.cache_path(features))
    }

    pub fn detector_config(&self, mode: Mode) -> DetectorConfig {
        let c = &self.config;
        DetectorConfig {
            mode,
            image_channels: 1,
            image_size: c.input_size,
            backbone_widths: c.backbone_widths,
            feature_size: 4,
            egre: EgreConfig {
                c1: c.backbone_widths[2],
                c2: 4,
                heads: c.heads,
                head_dim: c.head_dim,
            },
            error_size: c.input_size / 8,
        }
    }

    /// Trains one detector per subset (or only `subset`) on in-memory data.
    pub fn train_detectors_on(
        &self,
        data: &Dataset,
        mode: Mode,
        subset: Option<&str>,
        seed_label: &str,
    ) -> Result<Vec<(String, Detector)>> {
        let c = &self.config;
        let settings = TrainSettings {
            epochs: c.epochs,
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            optimizer: c.optimizer,
            grad_clip: None,
        };
        let tags: Vec<String> = match subset {
            Some(s) if data.subsets.iter().any(|t| t == s) => vec![s.to_string()],
            Some(s) => return Err(Error::Usage(format!("unknown subset {s:?}"))),
            None => data.subsets.clone(),
        };
        let trained: Vec<Result<(String, Detector)>> = tags
            .par_iter()
            .map(|tag| {
                let train = data.samples(tag, Split::Train);
                let val = data.samples(tag, Split::Val);
                let seed = self.seed(&format!("detector/{seed_label}/{mode}/{tag}"));
                let (det, log) = train_detector(&train, &val, self.detector_config(mode), &settings, seed)?;
                self.say(format!(
                    "detector {mode} on {tag}: best epoch {} (val acc {:.3})",
                    log.best_epoch,
                    log.val_acc.get(log.best_epoch).copied().unwrap_or(f64::NAN)
                ));
                Ok((tag.clone(), det))
            })
            .collect();
        trained.into_iter().collect()
    }

    /// Loads images and cached features for the whole manifest.
    pub fn dataset(&self, features: Features) -> Result<Dataset> {
        let manifest = self.load_manifest()?;
        let cache = self.load_cache(features)?;
        Dataset::load(self, manifest, &cache)
    }

    pub fn train_detectors(&self, mode: Mode, subset: Option<&str>, features: Features) -> Result<()> {
        let data = self.dataset(features)?;
        for (tag, det) in self.train_detectors_on(&data, mode, subset, features.as_str())? {
            checkpoint::write(&self.detector_path(features, mode, &tag), &checkpoint::detector_store(&det))?;
        }
        self.write_metadata("train-detector")
    }

    pub fn load_detector(&self, features: Features, mode: Mode, subset: &str) -> Result<Detector> {
        let path = self.detector_path(features, mode, subset);
        let det = checkpoint::detector_from_store(&checkpoint::read(&path)?, &path)?;
        if det.mode() != mode {
            return Err(Error::format(&path, format!("holds a {} detector", det.mode())));
        }
        Ok(det)
    }

    /// Evaluates the detector trained on each subset. With `full` every
    /// detector is scored on every subset's test split (row-major cells);
    /// otherwise only on its own subset.
    pub fn eval(&self, mode: Mode, features: Features, full: bool) -> Result<Vec<Cell>> {
        let data = self.dataset(features)?;
        let detectors = data
            .subsets
            .iter()
            .map(|t| Ok((t.clone(), self.load_detector(features, mode, t)?)))
            .collect::<Result<Vec<_>>>()?;
        let cells = if full {
            let m = cross_matrix(&detectors, &data)?;
            for t in m.train_tags() {
                if let Some((acc, ap)) = m.row_mean(t) {
                    self.say(format!("{mode} trained on {t}: mean acc {acc:.3}, mean ap {ap:.3}"));
                }
            }
            m.cells().to_vec()
        } else {
            detectors
                .iter()
                .map(|(tag, det)| evaluate(det, &data, tag, tag))
                .collect::<Result<Vec<_>>>()?
        };
        for c in &cells {
            self.say(format!("{} -> {}: acc {:.3}, ap {:.3}", c.train_tag, c.test_tag, c.acc, c.ap));
        }
        let name = if full { "matrix" } else { "eval" };
        report::write_csv(
            &self.report_path(&format!("{name}_{}_{mode}.csv", features.as_str())),
            &matrix_rows(&cells),
            report::MATRIX_HEADER,
        )?;
        self.write_metadata("eval")?;
        Ok(cells)
    }

    /// Real and generated latents for the loss-gap experiment: the first
    /// `lossgap_samples` reals and fakes of the extractor's own DDPM subset
    /// (or the first subset), re-encoded from their images.
    fn lossgap_latents(&self) -> Result<(Vec<LatentGrid>, Vec<LatentGrid>)> {
        let c = &self.config;
        let manifest = self.load_manifest()?;
        let tag = c
            .generators
            .iter()
            .find(|g| g.model == c.extractor && g.sampler == Sampler::Ddpm)
            .unwrap_or(&c.generators[0])
            .tag
            .clone();
        let n = c.lossgap_samples;
        let pick = |label: u8| -> Vec<String> {
            manifest
                .records
                .iter()
                .filter(|r| r.label == label && (label == 0 || r.generator == tag))
                .take(n)
                .map(|r| r.path.clone())
                .collect()
        };
        let (reals, fakes) = (pick(0), pick(1));
        if reals.len() < n || fakes.len() < n {
            return Err(lare_core::Error::Data(format!("need {n} reals and {n} fakes from {tag}")).into());
        }
        let codec = self.load_codec()?;
        Ok((
            self.encode(&codec, &self.read_images(&reals)?)?,
            self.encode(&codec, &self.read_images(&fakes)?)?,
        ))
    }

    /// Mean single-step denoising loss of reals and fakes over `t_grid`
    /// (default: 0.1T to 0.5T), with bootstrap confidence for the gap.
    pub fn lossgap(&self, t_grid: Option<&[usize]>) -> Result<LossGap> {
        let c = &self.config;
        let default: Vec<usize> = (1..=5).map(|k| k * c.steps / 10).collect();
        let grid = t_grid.unwrap_or(&default);
        let (real, fake) = self.lossgap_latents()?;
        let model = self.load_diffusion(&c.extractor)?;
        let profile = loss_gap_profile(&real, &fake, grid, &model, &c.schedule()?, self.seed("lossgap"))?;
        let bootstrap_positive = profile
            .real_losses
            .iter()
            .zip(&profile.fake_losses)
            .enumerate()
            .map(|(k, (r, f))| bootstrap_positive_fraction(r, f, 1000, rng::derive_index(self.seed("bootstrap"), k as u64)))
            .collect::<lare_core::Result<Vec<_>>>()?;
        let rows: Vec<LossGapRow> = profile
            .rows
            .iter()
            .map(|r| LossGapRow {
                t: r.t,
                mean_real: r.mean_real,
                mean_fake: r.mean_fake,
                n_real: r.n_real,
                n_fake: r.n_fake,
            })
            .collect();
        report::write_csv(&self.report_path("lossgap.csv"), &rows, report::LOSSGAP_HEADER)?;
        for (r, b) in rows.iter().zip(&bootstrap_positive) {
            self.say(format!(
                "t={:4}: real {:.3} fake {:.3} (gap > 0 in {:.1}% of resamples)",
                r.t,
                r.mean_real,
                r.mean_fake,
                100.0 * b
            ));
        }
        self.write_metadata("lossgap")?;
        Ok(LossGap {
            profile,
            bootstrap_positive,
        })
    }

    /// Times LaRE against the inversion baseline on the first
    /// `bench_images` manifest images.
    pub fn bench(&self) -> Result<Vec<Timing>> {
        let c = &self.config;
        let manifest = self.load_manifest()?;
        let rels: Vec<String> = manifest.records.iter().take(c.bench_images).map(|r| r.path.clone()).collect();
        let codec = self.load_codec()?;
        let latents = self.encode(&codec, &self.read_images(&rels)?)?;
        let model = self.load_diffusion(&c.extractor)?;
        let timings = bench_extraction(
            &latents,
            &model,
            &c.schedule()?,
            c.t_extract,
            c.e_ensemble,
            c.dire_steps,
            c.bench_repeats,
        )?;
        report::write_csv(&self.report_path("bench.csv"), &to_rows(&timings), report::BENCH_HEADER)?;
        for t in &timings {
            self.say(format!(
                "{:24} {:8.2} calls/image {:10.3} ms/image",
                t.method, t.calls_per_image, t.median_ms_per_image
            ));
        }
        self.write_metadata("bench")?;
        Ok(timings)
    }

    /// Re-extracts features and retrains detectors (configured mode) for
    /// each value of `t` or `e`, reporting matrix-average ACC and AP.
    pub fn sweep(&self, param: &str, grid: &[usize]) -> Result<Vec<SweepRow>> {
        if grid.is_empty() {
            return Err(Error::Usage("empty sweep grid".into()));
        }
        if param != "t" && param != "e" {
            return Err(Error::Usage(format!("cannot sweep {param:?}; use t or e")));
        }
        let manifest = self.load_manifest()?;
        let mut rows = Vec::with_capacity(grid.len());
        for &v in grid {
            let (t, e) = if param == "t" {
                (v, self.config.e_ensemble)
            } else {
                (self.config.t_extract, v)
            };
            let start = Instant::now();
            let cache = self.lare_cache(&manifest, t, e)?;
            let extract_s = start.elapsed().as_secs_f64();
            let data = Dataset::load(self, manifest.clone(), &cache)?;
            let detectors = self.train_detectors_on(&data, self.config.mode, None, &format!("sweep_{param}{v}"))?;
            let (avg_acc, avg_ap) = cross_matrix(&detectors, &data)?.mean();
            self.say(format!("{param}={v}: acc {avg_acc:.3}, ap {avg_ap:.3}, extraction {extract_s:.1}s"));
            rows.push(SweepRow {
                param: param.to_string(),
                value: v,
                avg_acc,
                avg_ap,
                extract_s,
            });
        }
        report::write_csv(&self.report_path(&format!("sweep_{param}.csv")), &rows, report::SWEEP_HEADER)?;
        self.write_metadata("sweep")?;
        Ok(rows)
    }

    /// Writes `count` test images per subset as PPMs with their LaRE map
    /// (summed over channels, nearest-upsampled) blended in red.
    pub fn overlay(&self, count: usize) -> Result<Vec<PathBuf>> {
        let manifest = self.load_manifest()?;
        let cache = self.load_cache(Features::Lare)?;
        let subsets = manifest.subsets();
        let mut chosen = Vec::new();
        for tag in &subsets {
            for label in [0, 1] {
                chosen.extend(manifest.select(tag, Split::Test).filter(|r| r.label == label).take(count));
            }
        }
        let heat: Vec<LatentGrid> = chosen
            .iter()
            .map(|r| {
                let m = cache.require(&r.id)?;
                let s = m.shape();
                let summed: Vec<f64> = m.values().chunks(s.channels).map(|c| c.iter().sum()).collect();
                let g = LatentGrid::new(GridShape::new(s.height, s.width, 1), summed)?;
                Ok(upsample_nearest(&g, self.config.input_size / s.height))
            })
            .collect::<Result<_>>()?;
        let peak = heat
            .iter()
            .flat_map(|h| h.values().iter().copied())
            .fold(0.0f64, f64::max)
            .max(f64::MIN_POSITIVE);
        let mut written = Vec::new();
        for (r, h) in chosen.iter().zip(&heat) {
            let img = image_io::read(&self.root.join(&r.path))?;
            let mut rgb = Vec::with_capacity(img.len() * 3);
            for (&v, &e) in img.values().iter().zip(h.values()) {
                let a = 0.7 * e / peak;
                let gray = (v + 1.0) / 2.0;
                rgb.extend([gray * (1.0 - a) + a, gray * (1.0 - a), gray * (1.0 - a)].map(|x| 2.0 * x - 1.0));
            }
            let s = img.shape();
            let out = LatentGrid::new(GridShape::new(s.height, s.width, 3), rgb)?;
            let path = self.report_path(&format!("overlay/{}.ppm", r.id.replace('/', "_")));
            image_io::write_pnm(&path, &out)?;
            written.push(path);
        }
        self.say(format!("wrote {} overlays", written.len()));
        self.write_metadata("overlay")?;
        Ok(written)
    }

    /// Every stage in order, training and evaluating all six detector modes.
    pub fn run_all(&self) -> Result<()> {
        self.forge()?;
        self.train_codec()?;
        self.train_diffusion(None)?;
        self.build_subsets()?;
        self.extract(None, None)?;
        for mode in Mode::ALL {
            self.train_detectors(mode, None, Features::Lare)?;
            self.eval(mode, Features::Lare, true)?;
        }
        self.lossgap(None)?;
        self.write_metadata("all")
    }
}

fn split_of(i: usize, n: usize) -> Split {
    if 10 * i < 8 * n {
        Split::Train
    } else if 10 * i < 9 * n {
        Split::Val
    } else {
        Split::Test
    }
}

/// Manifest images with their cached features, held in memory.
pub struct Dataset {
    pub manifest: Manifest,
    pub subsets: Vec<String>,
    images: Vec<LatentGrid>,
    features: Vec<LatentGrid>,
}

impl Dataset {
    /// Fails with a data error naming the first image without a cached
    /// feature.
    pub fn load(pipeline: &Pipeline, manifest: Manifest, cache: &FeatureCache) -> Result<Self> {
        let features = manifest
            .records
            .iter()
            .map(|r| cache.require(&r.id).cloned())
            .collect::<Result<Vec<_>>>()?;
        let rels: Vec<String> = manifest.records.iter().map(|r| r.path.clone()).collect();
        let images = pipeline.read_images(&rels)?;
        let subsets = manifest.subsets();
        Ok(Self {
            manifest,
            subsets,
            images,
            features,
        })
    }

    pub fn samples(&self, subset: &str, split: Split) -> Vec<DetectorSample<'_>> {
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.subset() == subset && r.split == split)
            .map(|(i, r)| DetectorSample {
                image: &self.images[i],
                lare: &self.features[i],
                label: r.label,
            })
            .collect()
    }

    fn ids(&self, subset: &str, split: Split) -> Vec<String> {
        self.manifest.select(subset, split).map(|r| r.id.clone()).collect()
    }
}

fn evaluate(det: &Detector, data: &Dataset, train_tag: &str, test_tag: &str) -> Result<Cell> {
    let samples = data.samples(test_tag, Split::Test);
    let scores = det.predict(&samples)?;
    let set = ScoredSet::new(scores, samples.iter().map(|s| s.label).collect(), data.ids(test_tag, Split::Test))?;
    let (acc, ap) = acc_ap(&set)?;
    Ok(Cell {
        train_tag: train_tag.to_string(),
        test_tag: test_tag.to_string(),
        acc,
        ap,
    })
}

/// Every detector on every subset's test split, cells evaluated in parallel
/// and assembled in a fixed order.
pub fn cross_matrix(detectors: &[(String, Detector)], data: &Dataset) -> Result<EvalMatrix> {
    let pairs: Vec<(usize, &String)> = (0..detectors.len())
        .flat_map(|d| data.subsets.iter().map(move |s| (d, s)))
        .collect();
    let cells: Vec<Result<Cell>> = pairs
        .par_iter()
        .map(|&(d, test)| evaluate(&detectors[d].1, data, &detectors[d].0, test))
        .collect();
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(EvalMatrix::new(
        detectors.iter().map(|d| d.0.clone()).collect(),
        data.subsets.clone(),
        cells,
    )?)
}

pub fn matrix_rows(cells: &[Cell]) -> Vec<MatrixRow> {
    cells
        .iter()
        .map(|c| MatrixRow {
            train_tag: c.train_tag.clone(),
            test_tag: c.test_tag.clone(),
            acc: c.acc,
            ap: c.ap,
        })
        .collect()
}
