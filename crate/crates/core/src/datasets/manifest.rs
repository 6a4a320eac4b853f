//! Newline-delimited JSON manifest.
//!
//! ```text
//! {"format_version":1,"dim":2}
//! {"id":"src-000000","domain":"source","split":"train","label":0,"features":[0.1,-2.5]}
//! {"id":"tgt-000003","domain":"target","split":"train","label":null,"features":[1.0,0.0]}
//! ```
//!
//! Floats are written in shortest round-trip form, so save followed by load is exact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Domain, DomainDataset, Example, Label};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    domain: Domain,
    split: Split,
    label: Option<u8>,
    features: Vec<f64>,
}

impl Record {
    fn from_example(ex: &Example, split: Split) -> Self {
        Record {
            id: ex.id.clone(),
            domain: ex.domain,
            split,
            label: ex.label.map(|l| l.index() as u8),
            features: ex.features.clone(),
        }
    }
}

fn manifest_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a manifest. Problems are reported with their 1-based line number.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DomainDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header: Header = loop {
        match lines.next() {
            None => return Err(manifest_error(path, 1, "missing header record")),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::io(path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line)
                    .map_err(|e| manifest_error(path, i + 1, format!("bad header: {e}")))?;
            }
        }
    };
    if header.format_version != FORMAT_VERSION {
        return Err(manifest_error(
            path,
            1,
            format!("unsupported format_version {}", header.format_version),
        ));
    }

    let mut ds = DomainDataset {
        dim: header.dim,
        shape: header.shape,
        source_train: Vec::new(),
        target_train_labeled: Vec::new(),
        target_train_unlabeled: Vec::new(),
        target_test: Vec::new(),
    };
    let mut seen = std::collections::HashSet::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| manifest_error(path, lineno, format!("malformed record: {e}")))?;
        if rec.features.len() != ds.dim {
            return Err(manifest_error(
                path,
                lineno,
                format!(
                    "record {} has {} features, header dim is {}",
                    rec.id,
                    rec.features.len(),
                    ds.dim
                ),
            ));
        }
        if rec.features.iter().any(|x| !x.is_finite()) {
            return Err(manifest_error(path, lineno, format!("record {} has non-finite features", rec.id)));
        }
        let label = match rec.label {
            None => None,
            Some(v) => Some(Label::from_index(v as usize).ok_or_else(|| {
                manifest_error(path, lineno, format!("record {} has non-binary label {v}", rec.id))
            })?),
        };
        if !seen.insert(rec.id.clone()) {
            return Err(manifest_error(path, lineno, format!("duplicate id {}", rec.id)));
        }
        let ex = Example {
            id: rec.id,
            features: rec.features,
            label,
            domain: rec.domain,
        };
        match (rec.domain, rec.split, label) {
            (Domain::Source, Split::Train, Some(_)) => ds.source_train.push(ex),
            (Domain::Source, Split::Train, None) => {
                return Err(manifest_error(
                    path,
                    lineno,
                    format!("source record {} must be labeled", ex.id),
                ))
            }
            (Domain::Source, Split::Test, _) => {
                return Err(manifest_error(
                    path,
                    lineno,
                    format!("record {}: source test split is not part of the data model", ex.id),
                ))
            }
            (Domain::Target, Split::Train, Some(_)) => ds.target_train_labeled.push(ex),
            (Domain::Target, Split::Train, None) => ds.target_train_unlabeled.push(ex),
            (Domain::Target, Split::Test, Some(_)) => ds.target_test.push(ex),
            (Domain::Target, Split::Test, None) => {
                return Err(manifest_error(
                    path,
                    lineno,
                    format!("test record {} must be labeled", ex.id),
                ))
            }
        }
    }
    ds.validate().map_err(|e| manifest_error(path, 0, e.to_string()))?;
    Ok(ds)
}

/// Writes `ds` so that [`load_manifest`] reproduces it exactly.
pub fn save_manifest(ds: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ds.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    let header = Header {
        format_version: FORMAT_VERSION,
        dim: ds.dim,
        shape: ds.shape.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    let pools = [
        (&ds.source_train, Split::Train),
        (&ds.target_train_labeled, Split::Train),
        (&ds.target_train_unlabeled, Split::Train),
        (&ds.target_test, Split::Test),
    ];
    for (pool, split) in pools {
        for ex in pool {
            let rec = Record::from_example(ex, split);
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
