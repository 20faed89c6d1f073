//! Error-guided refinement of backbone features and the detector built on it.
//!
//! The LaRE map is pooled onto the backbone grid and steers the detector in
//! two ways: as an additive bias on the logits of a single-query attention
//! pool over spatial positions (ESR), and as a sigmoid channel gate on the
//! global feature (ECR). A linear head classifies the concatenation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{param_err, shape_err};
use crate::grid::grids_to_cnhw;
use crate::math;
use crate::metrics::{accuracy, ScoredSet};
use crate::nn::{clip_global_norm, init_normal, Bound, Optimizer, ParamStore, TrainError, TrainSettings};
use crate::{rng, Error, LatentGrid, Result, Tensor};

/// What the classifier head sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Global image feature only.
    Baseline,
    /// Error-guided attention pool plus global feature.
    Esr,
    /// Error-gated global feature plus global feature.
    Ecr,
    /// Both refinements plus global feature.
    Egre,
    /// Global feature concatenated with the pooled error vector.
    Concat,
    /// The backbone applied to the error map alone.
    LareOnly,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Baseline,
        Mode::Esr,
        Mode::Ecr,
        Mode::Egre,
        Mode::Concat,
        Mode::LareOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Esr => "esr",
            Mode::Ecr => "ecr",
            Mode::Egre => "egre",
            Mode::Concat => "concat",
            Mode::LareOnly => "lare_only",
        }
    }

    /// Position in [`Mode::ALL`]; used as the numeric checkpoint code.
    pub fn code(self) -> usize {
        Mode::ALL.iter().position(|&m| m == self).expect("listed")
    }

    pub fn from_code(code: usize) -> Result<Self> {
        Mode::ALL
            .get(code)
            .copied()
            .ok_or_else(|| param_err!("unknown mode code {code}"))
    }

    fn uses_attention(self) -> bool {
        matches!(self, Mode::Esr | Mode::Egre)
    }

    fn uses_gate(self) -> bool {
        matches!(self, Mode::Ecr | Mode::Egre)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| param_err!("unknown mode {s:?}"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EgreConfig {
    /// Backbone feature width C1.
    pub c1: usize,
    /// Error-map channels C2.
    pub c2: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for EgreConfig {
    fn default() -> Self {
        Self {
            c1: 32,
            c2: 4,
            heads: 4,
            head_dim: 8,
        }
    }
}

impl EgreConfig {
    /// Width of the classifier input for `mode`.
    pub fn head_width(&self, mode: Mode) -> usize {
        match mode {
            Mode::Baseline | Mode::LareOnly => self.c1,
            Mode::Esr | Mode::Ecr => 2 * self.c1,
            Mode::Egre => 3 * self.c1,
            Mode::Concat => self.c1 + self.c2,
        }
    }

    /// Parameter names and shapes used by `mode`.
    pub fn param_shapes(&self, mode: Mode) -> Vec<(String, Vec<usize>)> {
        let (c1, c2, d) = (self.c1, self.c2, self.head_dim);
        let mut out = Vec::new();
        if mode.uses_attention() {
            for i in 0..self.heads {
                for m in ["wq", "wk", "wv"] {
                    out.push((format!("head{i}.{m}"), vec![c1, d]));
                }
                out.push((format!("head{i}.we"), vec![c2, 1]));
            }
            out.push((String::from("wo"), vec![self.heads * d, c1]));
        }
        if mode.uses_gate() {
            out.push((String::from("gate"), vec![c2, c1]));
        }
        out.push((String::from("cls.w"), vec![self.head_width(mode), 1]));
        out.push((String::from("cls.b"), vec![1]));
        out
    }

    fn validate(&self) -> Result<()> {
        if self.c1 == 0 || self.c2 == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(param_err!("refinement dimensions must be positive"));
        }
        Ok(())
    }

    /// Random projections, zero classifier.
    pub fn init_params(&self, mode: Mode, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut r = rng::seeded(seed);
        let mut p = ParamStore::new();
        for (name, shape) in self.param_shapes(mode) {
            let t = if name.starts_with("cls.") {
                Tensor::zeros(&shape)
            } else {
                init_normal(&mut r, &shape, shape[0], 1.0)
            };
            p.insert(name, t)?;
        }
        Ok(p)
    }
}

/// An error map pooled onto the feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignedError {
    /// `[h*w, C2]`, row-major over `(y, x)`.
    pub spatial: Tensor,
    /// Mean of the spatial rows.
    pub pooled: Vec<f64>,
}

/// Adaptive average pooling of `map` to `target_h x target_w`: output cell
/// `(i, j)` averages source rows `floor(i H / h') .. ceil((i+1) H / h')` and
/// the analogous columns.
pub fn align(map: &LatentGrid, target_h: usize, target_w: usize) -> Result<AlignedError> {
    let s = map.shape();
    if target_h == 0 || target_w == 0 {
        return Err(param_err!("alignment target must be at least 1x1"));
    }
    if target_h > s.height || target_w > s.width {
        return Err(param_err!(
            "cannot pool {}x{} up to {target_h}x{target_w}",
            s.height,
            s.width
        ));
    }
    let window = |i: usize, src: usize, dst: usize| (i * src / dst, ((i + 1) * src).div_ceil(dst));
    let c2 = s.channels;
    let mut spatial = Vec::with_capacity(target_h * target_w * c2);
    for i in 0..target_h {
        let (y0, y1) = window(i, s.height, target_h);
        for j in 0..target_w {
            let (x0, x1) = window(j, s.width, target_w);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            for c in 0..c2 {
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += map.get(y, x, c);
                    }
                }
                spatial.push(sum / count);
            }
        }
    }
    let rows = target_h * target_w;
    let pooled = (0..c2)
        .map(|c| (0..rows).map(|r| spatial[r * c2 + c]).sum::<f64>() / rows as f64)
        .collect();
    Ok(AlignedError {
        spatial: Tensor::from_vec(&[rows, c2], spatial)?,
        pooled,
    })
}

/// `softmax(Q K^T / sqrt(d) + E) V` with the softmax over keys.
pub fn esa(tape: &mut Tape<'_>, q: Var, k: Var, v: Var, e_bias: Var) -> Result<Var> {
    let (nq, d) = tape.value(q).dims2();
    let (n, dk) = tape.value(k).dims2();
    let (nv, _) = tape.value(v).dims2();
    if dk != d || nv != n || tape.value(e_bias).shape() != [nq, n] {
        return Err(shape_err!(
            "attention shapes Q {:?}, K {:?}, V {:?}, E {:?}",
            tape.value(q).shape(),
            tape.value(k).shape(),
            tape.value(v).shape(),
            tape.value(e_bias).shape()
        ));
    }
    let kt = tape.transpose(k);
    let qk = tape.matmul(q, kt);
    let scaled = tape.scale(qk, 1.0 / math::sqrt(d as f64));
    let logits = tape.add(scaled, e_bias);
    if !tape.value(logits).is_finite() {
        return Err(Error::Numeric("attention logits".into()));
    }
    let attn = tape.softmax_rows(logits);
    Ok(tape.matmul(attn, v))
}

/// Multi-head error-guided attention. `q` is `[n_q, C1]`, `kv` is `[n, C1]`,
/// `err` is `[n, C2]`; the result is `[n_q, C1]`. Head `i` reads
/// `{prefix}head{i}.{wq,wk,wv,we}` and the output projection `{prefix}wo`.
pub fn mhesa(
    tape: &mut Tape<'_>,
    p: &Bound<'_>,
    prefix: &str,
    config: &EgreConfig,
    q: Var,
    kv: Var,
    err: Var,
) -> Result<Var> {
    let (nq, c1) = tape.value(q).dims2();
    let (n, c1k) = tape.value(kv).dims2();
    let (ne, c2) = tape.value(err).dims2();
    if c1 != config.c1 || c1k != config.c1 || ne != n || c2 != config.c2 {
        return Err(shape_err!(
            "refinement expects C1={}, C2={}; got q {nq}x{c1}, kv {n}x{c1k}, err {ne}x{c2}",
            config.c1,
            config.c2
        ));
    }
    let mut heads = Vec::with_capacity(config.heads);
    for i in 0..config.heads {
        let w = |m: &str| p.var(&format!("{prefix}head{i}.{m}"));
        let qh = tape.matmul(q, w("wq"));
        let kh = tape.matmul(kv, w("wk"));
        let vh = tape.matmul(kv, w("wv"));
        let e = tape.matmul(err, w("we"));
        let mut bias = tape.transpose(e);
        if nq > 1 {
            let rows = vec![bias; nq];
            bias = tape.concat(&rows, 0);
        }
        heads.push(esa(tape, qh, kh, vh, bias)?);
    }
    let cat = tape.concat(&heads, 1);
    Ok(tape.matmul(cat, p.var(&format!("{prefix}wo"))))
}

/// `x_s`: the global feature attends over the spatial rows, guided by the
/// aligned error map.
pub fn spatial_refine(
    tape: &mut Tape<'_>,
    p: &Bound<'_>,
    prefix: &str,
    config: &EgreConfig,
    spatial: Var,
    global: Var,
    err: Var,
) -> Result<Var> {
    let rows = tape.value(spatial).dims2().0;
    if tape.value(err).dims2().0 != rows {
        return Err(shape_err!(
            "{rows} feature rows but {} error rows",
            tape.value(err).dims2().0
        ));
    }
    mhesa(tape, p, prefix, config, global, spatial, err)
}

/// `x_c = sigmoid(pooled_err . W) * global`, no bias.
pub fn channel_refine(
    tape: &mut Tape<'_>,
    p: &Bound<'_>,
    prefix: &str,
    config: &EgreConfig,
    global: Var,
    pooled_err: Var,
) -> Result<Var> {
    if tape.value(global).shape() != [1, config.c1] || tape.value(pooled_err).shape() != [1, config.c2] {
        return Err(shape_err!(
            "gate expects [1, {}] and [1, {}] inputs",
            config.c1,
            config.c2
        ));
    }
    let z = tape.matmul(pooled_err, p.var(&format!("{prefix}gate")));
    let g = tape.sigmoid(z);
    Ok(tape.mul(g, global))
}

/// Linear classifier over the concatenated `[1, *]` parts; returns `[1, 1]`.
pub fn fuse_and_classify(tape: &mut Tape<'_>, p: &Bound<'_>, prefix: &str, parts: &[Var]) -> Result<Var> {
    let feats = tape.concat(parts, 1);
    classify_rows(tape, p, prefix, feats)
}

fn classify_rows(tape: &mut Tape<'_>, p: &Bound<'_>, prefix: &str, feats: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}cls.w"));
    let width = tape.value(w).dims2().0;
    if tape.value(feats).dims2().1 != width {
        return Err(shape_err!(
            "classifier expects {width} features, got {}",
            tape.value(feats).dims2().1
        ));
    }
    let z = tape.matmul(feats, w);
    Ok(tape.add_row_bias(z, p.var(&format!("{prefix}cls.b"))))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectorConfig {
    pub mode: Mode,
    pub image_channels: usize,
    pub image_size: usize,
    pub backbone_widths: [usize; 3],
    pub feature_size: usize,
    pub egre: EgreConfig,
    /// Spatial side of the error maps (the latent grid).
    pub error_size: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Egre,
            image_channels: 1,
            image_size: 64,
            backbone_widths: [16, 32, 32],
            feature_size: 4,
            egre: EgreConfig::default(),
            error_size: 8,
        }
    }
}

impl DetectorConfig {
    pub fn backbone(&self) -> BackboneConfig {
        let (input_channels, input_size) = match self.mode {
            Mode::LareOnly => (self.egre.c2, self.error_size),
            _ => (self.image_channels, self.image_size),
        };
        BackboneConfig {
            input_channels,
            input_size,
            widths: self.backbone_widths,
            output_size: self.feature_size,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.backbone_widths[2] != self.egre.c1 {
            return Err(param_err!(
                "backbone width {} differs from C1 {}",
                self.backbone_widths[2],
                self.egre.c1
            ));
        }
        self.egre.validate()?;
        self.backbone().stages().map(|_| ())
    }
}

/// One labelled example: an image, its error map and `label` 1 for fake.
#[derive(Clone, Copy, Debug)]
pub struct DetectorSample<'a> {
    pub image: &'a LatentGrid,
    pub lare: &'a LatentGrid,
    pub label: u8,
}

/// Backbone plus refinement head. Parameters live in one store under the
/// `backbone.` and `egre.` namespaces; the [`Backbone`] value supplies the
/// layer plan and input checks.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    backbone: Backbone,
    params: ParamStore,
}

impl Detector {
    pub fn init(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::init(config.backbone(), rng::derive_seed(seed, "backbone"))?;
        let egre = config.egre.init_params(config.mode, rng::derive_seed(seed, "egre"))?;
        Self::assemble(config, backbone, &egre)
    }

    fn assemble(config: DetectorConfig, backbone: Backbone, egre: &ParamStore) -> Result<Self> {
        let mut params = ParamStore::new();
        params.extend_prefixed("backbone.", backbone.params())?;
        params.extend_prefixed("egre.", egre)?;
        Ok(Self {
            config,
            backbone,
            params,
        })
    }

    /// Rebuilds a detector from namespaced records, checking every shape.
    pub fn from_params(config: DetectorConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::from_params(config.backbone(), &store.with_prefix_stripped("backbone."))?;
        let src = store.with_prefix_stripped("egre.");
        let mut egre = ParamStore::new();
        for (name, shape) in config.egre.param_shapes(config.mode) {
            src.expect(&name, &shape)?;
            egre.insert(name.clone(), src.get(&name).expect("checked").clone())?;
        }
        Self::assemble(config, backbone, &egre)
    }

    pub fn config(&self) -> DetectorConfig {
        self.config
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_sample(&self, s: &DetectorSample<'_>) -> Result<()> {
        let c = &self.config;
        let e = s.lare.shape();
        if (e.height, e.width, e.channels) != (c.error_size, c.error_size, c.egre.c2) {
            return Err(shape_err!(
                "error map must be {0}x{0}x{1}, got {2}x{3}x{4}",
                c.error_size,
                c.egre.c2,
                e.height,
                e.width,
                e.channels
            ));
        }
        if s.label > 1 {
            return Err(param_err!("labels must be 0 or 1"));
        }
        if c.mode == Mode::LareOnly {
            Ok(())
        } else {
            self.backbone.check_input(s.image)
        }
    }

    /// Logits `[N, 1]` for a batch.
    pub fn logits(&self, tape: &mut Tape<'_>, p: &Bound<'_>, batch: &[DetectorSample<'_>]) -> Result<Var> {
        for s in batch {
            self.check_sample(s)?;
        }
        let c = &self.config;
        let inputs: Vec<&LatentGrid> = batch
            .iter()
            .map(|s| if c.mode == Mode::LareOnly { s.lare } else { s.image })
            .collect();
        let x = tape.constant(grids_to_cnhw(&inputs)?);
        let fmap = self.backbone.forward(tape, p, "backbone.", x);
        let fs = c.feature_size;
        let mut rows = Vec::with_capacity(batch.len());
        for (n, s) in batch.iter().enumerate() {
            let (spatial, global) = Backbone::bundle(tape, fmap, n);
            let aligned = align(s.lare, fs, fs)?;
            let mut parts = Vec::with_capacity(3);
            if c.mode.uses_attention() {
                let err = tape.constant(aligned.spatial.clone());
                parts.push(spatial_refine(tape, p, "egre.", &c.egre, spatial, global, err)?);
            }
            if c.mode.uses_gate() {
                let pooled = tape.constant(Tensor::from_vec(&[1, c.egre.c2], aligned.pooled.clone())?);
                parts.push(channel_refine(tape, p, "egre.", &c.egre, global, pooled)?);
            }
            parts.push(global);
            if c.mode == Mode::Concat {
                parts.push(tape.constant(Tensor::from_vec(&[1, c.egre.c2], aligned.pooled)?));
            }
            rows.push(tape.concat(&parts, 1));
        }
        let feats = tape.concat(&rows, 0);
        classify_rows(tape, p, "egre.", feats)
    }

    /// Fake probabilities.
    pub fn predict(&self, samples: &[DetectorSample<'_>]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape);
            let z = self.logits(&mut tape, &p, chunk)?;
            let probs = tape.sigmoid(z);
            let v = tape.value(probs);
            if !v.is_finite() {
                return Err(Error::Numeric("detector output".into()));
            }
            out.extend_from_slice(v.data());
        }
        Ok(out)
    }

    /// Accuracy at threshold 0.5.
    pub fn accuracy(&self, samples: &[DetectorSample<'_>]) -> Result<f64> {
        let scores = self.predict(samples)?;
        let set = ScoredSet::unnamed(scores, samples.iter().map(|s| s.label).collect())?;
        accuracy(&set, 0.5)
    }
}

/// Per-epoch training loss and validation accuracy.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectorTrainLog {
    pub epoch_loss: Vec<f64>,
    pub val_acc: Vec<f64>,
    /// Epoch (0-based) whose parameters were kept.
    pub best_epoch: usize,
}

/// Minimises mean BCE over the training samples and keeps the epoch with the
/// best validation accuracy (earliest on ties; the last epoch if `val` is
/// empty).
pub fn train_detector(
    train: &[DetectorSample<'_>],
    val: &[DetectorSample<'_>],
    config: DetectorConfig,
    settings: &TrainSettings,
    seed: u64,
) -> Result<(Detector, DetectorTrainLog), TrainError> {
    let wrap = |e| TrainError::new(e, None);
    if train.is_empty() {
        return Err(wrap(param_err!("no training samples")));
    }
    settings.validate().map_err(wrap)?;
    let mut det = Detector::init(config, rng::derive_seed(seed, "init")).map_err(wrap)?;
    let mut opt = Optimizer::new(settings.optimizer, settings.learning_rate);
    let mut r = rng::seeded(rng::derive_seed(seed, "train"));
    let mut log = DetectorTrainLog::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut step = 0;
    for epoch in 0..settings.epochs {
        let order = rng::permutation(&mut r, train.len());
        let mut total = 0.0;
        for idx in order.chunks(settings.batch_size) {
            let batch: Vec<DetectorSample<'_>> = idx.iter().map(|&i| train[i]).collect();
            let labels: Vec<f64> = batch.iter().map(|s| f64::from(s.label)).collect();
            let mut grads = {
                let mut tape = Tape::new();
                let p = det.params.bind(&mut tape);
                let z = det.logits(&mut tape, &p, &batch).map_err(wrap)?;
                let loss = tape.bce_with_logits(z, &labels);
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(TrainError::diverged(step, det.params.clone()));
                }
                total += value * batch.len() as f64;
                let mut g = tape.backward(loss);
                p.collect(&mut g)
            };
            if let Some(max) = settings.grad_clip {
                clip_global_norm(&mut grads, max);
            }
            let before = det.params.clone();
            opt.step(&mut det.params, &grads);
            if !det.params.all_finite() {
                return Err(TrainError::diverged(step, before));
            }
            step += 1;
        }
        log.epoch_loss.push(total / train.len() as f64);
        if !val.is_empty() {
            let acc = det.accuracy(val).map_err(wrap)?;
            log.val_acc.push(acc);
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, det.params.clone()));
                log.best_epoch = epoch;
            }
        } else {
            log.best_epoch = epoch;
        }
    }
    if let Some((_, params)) = best {
        det.params = params;
    }
    det.params.round_to_f32();
    Ok((det, log))
}
