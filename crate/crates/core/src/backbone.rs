//! Three-stage strided CNN producing the spatial feature map and pooled
//! global feature that the refinement module consumes.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::error::{param_err, shape_err};
use crate::grid::grids_to_cnhw;
use crate::nn::{init_normal, Bound, ParamStore};
use crate::{rng, LatentGrid, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub input_channels: usize,
    /// Square input side length.
    pub input_size: usize,
    /// Channel widths of the three stages; the last is the feature width C1.
    pub widths: [usize; 3],
    /// Side length of the output feature map.
    pub output_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            input_size: 64,
            widths: [16, 32, 32],
            output_size: 4,
        }
    }
}

/// `(kernel, stride, padding)` of one stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl BackboneConfig {
    pub fn feature_width(&self) -> usize {
        self.widths[2]
    }

    pub fn positions(&self) -> usize {
        self.output_size * self.output_size
    }

    /// The last two stages halve the resolution while reduction remains; the
    /// first takes the rest with a non-overlapping `stride x stride` kernel.
    pub fn stages(&self) -> Result<[Stage; 3]> {
        let (i, o) = (self.input_size, self.output_size);
        if o == 0 || i % o != 0 {
            return Err(param_err!("input size {i} is not a multiple of output size {o}"));
        }
        let f = i / o;
        let s3 = f.min(2);
        let s2 = (f / s3).min(2);
        if f % (s2 * s3) != 0 {
            return Err(param_err!("reduction factor {f} is not supported"));
        }
        let s1 = f / (s2 * s3);
        let stage = |s: usize| {
            if s <= 2 {
                Stage { kernel: 3, stride: s, pad: 1 }
            } else {
                Stage { kernel: s, stride: s, pad: 0 }
            }
        };
        Ok([stage(s1), stage(s2), stage(s3)])
    }

    fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.widths.contains(&0) {
            return Err(param_err!("backbone widths must be positive"));
        }
        self.stages().map(|_| ())
    }
}

/// Feature bundle of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `[h*w, C1]`, one row per position, row-major over `(y, x)`.
    pub spatial: Tensor,
    /// Mean of the spatial rows.
    pub global_feat: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
}

fn layer_shapes(c: &BackboneConfig) -> Result<Vec<[usize; 4]>> {
    let stages = c.stages()?;
    let mut cin = c.input_channels;
    Ok(stages
        .iter()
        .zip(c.widths)
        .map(|(s, w)| {
            let shape = [w, cin, s.kernel, s.kernel];
            cin = w;
            shape
        })
        .collect())
}

impl Backbone {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let mut params = ParamStore::new();
        for (i, s) in layer_shapes(&config)?.into_iter().enumerate() {
            let fan_in = s[1] * s[2] * s[3];
            params.insert(format!("stage{i}.w"), init_normal(&mut r, &s, fan_in, 1.0))?;
            params.insert(format!("stage{i}.b"), Tensor::zeros(&[s[0]]))?;
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: BackboneConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (i, s) in layer_shapes(&config)?.into_iter().enumerate() {
            for (key, shape) in [(format!("stage{i}.w"), &s[..]), (format!("stage{i}.b"), &s[..1])] {
                store.expect(&key, shape)?;
                params.insert(key.clone(), store.get(&key).expect("checked").clone())?;
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> BackboneConfig {
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

    pub fn check_input(&self, image: &LatentGrid) -> Result<()> {
        let c = &self.config;
        let s = image.shape();
        if (s.height, s.width, s.channels) != (c.input_size, c.input_size, c.input_channels) {
            return Err(shape_err!(
                "backbone expects {0}x{0}x{1} input, got {2}x{3}x{4}",
                c.input_size,
                c.input_channels,
                s.height,
                s.width,
                s.channels
            ));
        }
        Ok(())
    }

    /// `[C_in, N, H, W] -> [C1, N, h, w]`. `p` may be any bound store holding
    /// this backbone's names under `prefix`.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound<'_>, prefix: &str, x: Var) -> Var {
        let stages = self.config.stages().expect("validated");
        let mut h = x;
        for (i, s) in stages.iter().enumerate() {
            let w = p.var(&format!("{prefix}stage{i}.w"));
            let b = p.var(&format!("{prefix}stage{i}.b"));
            h = tape.conv2d(h, w, Some(b), s.stride, s.pad);
            h = tape.silu(h);
        }
        h
    }

    /// `(spatial [h*w, C1], global [1, C1])` of sample `n` of a feature map.
    pub fn bundle(tape: &mut Tape<'_>, fmap: Var, n: usize) -> (Var, Var) {
        let spatial = tape.sample_rows(fmap, n);
        let global = tape.mean_rows(spatial);
        (spatial, global)
    }

    /// Feature bundles for a batch of images.
    pub fn features_batch(&self, images: &[LatentGrid]) -> Result<Vec<FeatureBundle>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            for img in chunk {
                self.check_input(img)?;
            }
            let refs: Vec<&LatentGrid> = chunk.iter().collect();
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape);
            let x = tape.constant(grids_to_cnhw(&refs)?);
            let fmap = self.forward(&mut tape, &p, "", x);
            for n in 0..chunk.len() {
                let (s, g) = Self::bundle(&mut tape, fmap, n);
                out.push(FeatureBundle {
                    spatial: tape.value(s).clone(),
                    global_feat: tape.value(g).data().to_vec(),
                });
            }
        }
        Ok(out)
    }

    pub fn features(&self, image: &LatentGrid) -> Result<FeatureBundle> {
        Ok(self.features_batch(core::slice::from_ref(image))?.pop().expect("one bundle"))
    }
}
