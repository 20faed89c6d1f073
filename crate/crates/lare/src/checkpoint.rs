//! The shared checkpoint format: magic `LARE2CK1`, a u32 record count, then
//! per record a u32 name length, the UTF-8 name, a u32 rank, rank u32 dims,
//! and the values as little-endian f32. All integers are little-endian.
//!
//! Models are stored under name prefixes (`codec.`, `denoiser.`,
//! `backbone.`, `egre.`) together with small config records, so one reader
//! serves every model.

use std::path::Path;

use lare_core::codec::{CodecConfig, LatentCodec};
use lare_core::diffusion::{ConvDenoiser, DenoiserConfig};
use lare_core::egre::{Detector, DetectorConfig, EgreConfig, Mode};
use lare_core::nn::ParamStore;
use lare_core::Tensor;

use crate::binio::{put_f32s, put_str, put_u32, read_file, write_file, Reader};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LARE2CK1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    put_u32(&mut out, store.len());
    for (name, t) in store.iter() {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, t.data());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(path, format!("record {name} too large")))?;
        let data = r.f32s(len)?;
        let t = Tensor::from_vec(&shape, data).map_err(|e| Error::format(path, e.to_string()))?;
        store
            .insert(name, t)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    r.finish()?;
    Ok(store)
}

pub fn write(path: &Path, store: &ParamStore) -> Result<()> {
    write_file(path, &encode(store))
}

pub fn read(path: &Path) -> Result<ParamStore> {
    decode(&read_file(path)?, path)
}

fn usizes(v: &[usize]) -> Tensor {
    Tensor::from_vec(&[v.len()], v.iter().map(|&x| x as f64).collect()).expect("rank 1")
}

fn config_record(store: &ParamStore, name: &str, len: usize, path: &Path) -> Result<Vec<usize>> {
    let t = store
        .get(name)
        .ok_or_else(|| Error::format(path, format!("missing {name} record")))?;
    if t.shape() != [len] || t.data().iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
        return Err(Error::format(path, format!("malformed {name} record")));
    }
    Ok(t.data().iter().map(|&v| v as usize).collect())
}

fn loaded<T>(r: lare_core::Result<T>, path: &Path) -> Result<T> {
    r.map_err(|e| Error::format(path, e.to_string()))
}

pub fn codec_store(codec: &LatentCodec) -> ParamStore {
    let c = codec.config();
    let mut out = ParamStore::new();
    let cfg = [c.image_channels, c.latent_channels, c.widths[0], c.widths[1], c.widths[2]];
    out.insert("codec.config", usizes(&cfg)).expect("fresh store");
    out.extend_prefixed("codec.", &codec.to_params()).expect("fresh names");
    out
}

pub fn codec_from_store(store: &ParamStore, path: &Path) -> Result<LatentCodec> {
    let c = config_record(store, "codec.config", 5, path)?;
    let cfg = CodecConfig {
        image_channels: c[0],
        latent_channels: c[1],
        widths: [c[2], c[3], c[4]],
    };
    let mut params = store.with_prefix_stripped("codec.");
    params = without(&params, "config");
    loaded(LatentCodec::from_params(cfg, &params), path)
}

pub fn denoiser_store(model: &ConvDenoiser) -> ParamStore {
    let c = model.config();
    let mut out = ParamStore::new();
    let cfg = [c.latent_channels, c.width, c.blocks, c.time_dim, c.time_hidden];
    out.insert("denoiser.config", usizes(&cfg)).expect("fresh store");
    out.extend_prefixed("denoiser.", model.params()).expect("fresh names");
    out
}

pub fn denoiser_from_store(store: &ParamStore, path: &Path) -> Result<ConvDenoiser> {
    let c = config_record(store, "denoiser.config", 5, path)?;
    let cfg = DenoiserConfig {
        latent_channels: c[0],
        width: c[1],
        blocks: c[2],
        time_dim: c[3],
        time_hidden: c[4],
    };
    let params = without(&store.with_prefix_stripped("denoiser."), "config");
    loaded(ConvDenoiser::from_params(cfg, params), path)
}

/// Detector records: `mode` first (the mode's code), then the architecture,
/// then the `backbone.*` and `egre.*` weights.
pub fn detector_store(det: &Detector) -> ParamStore {
    let c = det.config();
    let mut out = ParamStore::new();
    out.insert("mode", usizes(&[c.mode.code()])).expect("fresh store");
    let cfg = [
        c.image_channels,
        c.image_size,
        c.backbone_widths[0],
        c.backbone_widths[1],
        c.backbone_widths[2],
        c.feature_size,
        c.egre.c1,
        c.egre.c2,
        c.egre.heads,
        c.egre.head_dim,
        c.error_size,
    ];
    out.insert("detector.config", usizes(&cfg)).expect("fresh store");
    for (name, t) in det.params().iter() {
        out.insert(name, t.clone()).expect("fresh names");
    }
    out
}

pub fn detector_from_store(store: &ParamStore, path: &Path) -> Result<Detector> {
    let mode = Mode::from_code(config_record(store, "mode", 1, path)?[0])
        .map_err(|e| Error::format(path, e.to_string()))?;
    let c = config_record(store, "detector.config", 11, path)?;
    let cfg = DetectorConfig {
        mode,
        image_channels: c[0],
        image_size: c[1],
        backbone_widths: [c[2], c[3], c[4]],
        feature_size: c[5],
        egre: EgreConfig {
            c1: c[6],
            c2: c[7],
            heads: c[8],
            head_dim: c[9],
        },
        error_size: c[10],
    };
    loaded(Detector::from_params(cfg, store), path)
}

fn without(store: &ParamStore, skip: &str) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter().filter(|(n, _)| *n != skip) {
        out.insert(name, t.clone()).expect("unique");
    }
    out
}
