//! Feature caches: magic `LAREFT1`, a u32 record count, then per record a
//! u32 id length, the UTF-8 image id, u32 `H`, `W`, `C`, u32 `t`, u32 `e`
//! and `H*W*C` little-endian f32 values in `(y, x, c)` order.
//!
//! Inversion-baseline caches use the same layout with `e = 0` and `t` set
//! to the number of inversion steps.

use std::collections::BTreeMap;
use std::path::Path;

use lare_core::{GridShape, LatentGrid};

use crate::binio::{put_f32s, put_str, put_u32, read_file, write_file, Reader};
use crate::{Error, Result};

pub const MAGIC: &[u8; 7] = b"LAREFT1";

#[derive(Clone, Debug, PartialEq)]
pub struct CacheRecord {
    pub id: String,
    pub map: LatentGrid,
    pub t: usize,
    pub e: usize,
}

/// Feature maps keyed by image id, kept in insertion order on disk.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureCache {
    records: Vec<CacheRecord>,
    index: BTreeMap<String, usize>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: CacheRecord) -> Result<()> {
        if self.index.contains_key(&record.id) {
            return Err(lare_core::Error::Data(format!("duplicate cache id {}", record.id)).into());
        }
        self.index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[CacheRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CacheRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    /// The map for `id`, or a data error naming the image.
    pub fn require(&self, id: &str) -> Result<&LatentGrid> {
        self.get(id)
            .map(|r| &r.map)
            .ok_or_else(|| lare_core::Error::Data(format!("no cached feature for image {id}")).into())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, self.records.len());
        for r in &self.records {
            put_str(&mut out, &r.id);
            let s = r.map.shape();
            for v in [s.height, s.width, s.channels, r.t, r.e] {
                put_u32(&mut out, v);
            }
            put_f32s(&mut out, r.map.values());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(MAGIC)?;
        let n = r.u32()?;
        let mut cache = Self::new();
        for _ in 0..n {
            let id = r.string()?;
            let (h, w, c, t, e) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?, r.u32()?);
            let shape = GridShape::new(h, w, c);
            let values = r.f32s(shape.len())?;
            let map = LatentGrid::new(shape, values).map_err(|err| Error::format(r.path(), err.to_string()))?;
            cache
                .push(CacheRecord { id, map, t, e })
                .map_err(|err| Error::format(path, err.to_string()))?;
        }
        r.finish()?;
        Ok(cache)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }
}
