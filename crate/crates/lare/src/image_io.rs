//! Image files: magic `LIMG1`, u32 `H`, `W`, `C`, then `H*W*C`
//! little-endian f32 values in `[-1, 1]`, `(y, x, c)` order. PGM/PPM export
//! is for looking at, not for reading back.

use std::path::Path;

use lare_core::{GridShape, LatentGrid};

use crate::binio::{put_f32s, put_u32, read_file, write_file, Reader};
use crate::{Error, Result};

pub const MAGIC: &[u8; 5] = b"LIMG1";

pub fn encode(img: &LatentGrid) -> Vec<u8> {
    let s = img.shape();
    let mut out = MAGIC.to_vec();
    for v in [s.height, s.width, s.channels] {
        put_u32(&mut out, v);
    }
    put_f32s(&mut out, img.values());
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<LatentGrid> {
    let mut r = Reader::new(bytes, path);
    r.magic(MAGIC)?;
    let shape = GridShape::new(r.u32()?, r.u32()?, r.u32()?);
    let values = r.f32s(shape.len())?;
    r.finish()?;
    LatentGrid::new(shape, values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write(path: &Path, img: &LatentGrid) -> Result<()> {
    write_file(path, &encode(img))
}

pub fn read(path: &Path) -> Result<LatentGrid> {
    decode(&read_file(path)?, path)
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Binary PGM (one channel) or PPM (three channels).
pub fn write_pnm(path: &Path, img: &LatentGrid) -> Result<()> {
    let s = img.shape();
    let kind = match s.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(lare_core::Error::Shape(format!("cannot export {c}-channel image")).into()),
    };
    let mut out = format!("{kind}\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend(img.values().iter().map(|&v| to_byte(v)));
    write_file(path, &out)
}
