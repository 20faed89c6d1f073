//! CSV reports with fixed headers.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossGapRow {
    pub t: usize,
    pub mean_real: f64,
    pub mean_fake: f64,
    pub n_real: usize,
    pub n_fake: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub train_tag: String,
    pub test_tag: String,
    pub acc: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub calls_per_image: f64,
    pub median_ms_per_image: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: usize,
    pub avg_acc: f64,
    pub avg_ap: f64,
    pub extract_s: f64,
}

pub const LOSSGAP_HEADER: &str = "t,mean_real,mean_fake,n_real,n_fake";
pub const MATRIX_HEADER: &str = "train_tag,test_tag,acc,ap";
pub const BENCH_HEADER: &str = "method,calls_per_image,median_ms_per_image";
pub const SWEEP_HEADER: &str = "param,value,avg_acc,avg_ap,extract_s";

pub fn to_csv<T: Serialize>(rows: &[T], header: &str) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory CSV");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("UTF-8 fields");
    format!("{header}\n{body}")
}

pub fn from_csv<T: DeserializeOwned>(text: &str, header: &str, path: &Path) -> Result<Vec<T>> {
    let first = text.lines().next().unwrap_or_default();
    if first != header {
        return Err(Error::format(path, format!("expected header {header:?}, found {first:?}")));
    }
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &str) -> Result<()> {
    write_file(path, to_csv(rows, header).as_bytes())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path, header: &str) -> Result<Vec<T>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
    from_csv(&text, header, path)
}
