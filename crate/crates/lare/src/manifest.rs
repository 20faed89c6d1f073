//! Dataset manifests: JSON lines of `{id, path, label, generator, split}`.
//! Paths are relative to the manifest's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.to_string() == s)
            .ok_or_else(|| Error::Usage(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub path: String,
    /// 1 for generated, 0 for real.
    pub label: u8,
    /// `"real"` or the tag of the generating model.
    pub generator: String,
    pub split: Split,
}

impl Record {
    /// The subset the image belongs to: the id up to its first `/`.
    pub fn subset(&self) -> &str {
        self.id.split_once('/').map_or("", |(s, _)| s)
    }
}

/// Images grouped into subsets, one per generator: that generator's fakes
/// plus a disjoint set of reals. Ids are `<subset>/<name>`, which is how a
/// real image records the subset it was paired with.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<Record>,
}

impl Manifest {
    /// Ids unique, labels binary, reals tagged `real` and fakes not.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(lare_core::Error::Data(format!("duplicate image id {}", r.id)).into());
            }
            if r.subset().is_empty() {
                return Err(lare_core::Error::Data(format!("image id {} lacks a subset prefix", r.id)).into());
            }
            if r.label > 1 || (r.label == 0) != (r.generator == "real") {
                return Err(lare_core::Error::Data(format!("inconsistent label for image {}", r.id)).into());
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("plain record"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        let m = Self { records };
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_jsonl().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
        Self::from_jsonl(&text, path)
    }

    /// Subset tags in first-appearance order.
    pub fn subsets(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.iter().any(|s| s == r.subset()) {
                out.push(r.subset().to_string());
            }
        }
        out
    }

    /// Records of one subset and split, in manifest order.
    pub fn select<'a>(&'a self, subset: &'a str, split: Split) -> impl Iterator<Item = &'a Record> + 'a {
        self.records
            .iter()
            .filter(move |r| r.subset() == subset && r.split == split)
    }
}
