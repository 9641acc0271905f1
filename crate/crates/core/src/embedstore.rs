//! The `emb-jsonl/1` embedding interchange format.
//!
//! A store is a JSON-lines file. The first line is a header,
//!
//! ```text
//! {"format":"emb-jsonl/1","encoder":"LABSE-14","dim":768}
//! ```
//!
//! and each following line is one record:
//!
//! ```text
//! {"key":"s12/image/img3","role":"image","dim":768,"vector":[0.013, ...]}
//! ```
//!
//! Keys are ASCII, `/`-separated: `<sample_id>/<role>/<variant>`. For
//! candidate roles the variant is the image id; for queries it is the LLM
//! name, with `compound` reserved for the raw compound text. Vectors are kept
//! as the encoder produced them (no normalization). Floats are written in
//! shortest round-trip decimal form, so a read/write cycle is bit-exact.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Sample;

pub const FORMAT_TAG: &str = "emb-jsonl/1";

/// Query variant holding the embedding of the raw compound text.
pub const COMPOUND_QUERY: &str = "compound";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("failed to access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("record {key}: dim {found} does not match store dim {expected}")]
    DimMismatch {
        key: String,
        expected: usize,
        found: usize,
    },
    #[error("record {key}: non-finite value at index {index}")]
    NonFinite { key: String, index: usize },
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("invalid key {0:?}: keys are ASCII <sample>/<role>/<variant>")]
    InvalidKey(String),
    #[error("missing key {key}; nearest: {}", .nearest.join(", "))]
    Missing { key: String, nearest: Vec<String> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Image,
    Caption,
    ImageAug,
    CaptionBt,
    CaptionPara,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Image => "image",
            Role::Caption => "caption",
            Role::ImageAug => "image_aug",
            Role::CaptionBt => "caption_bt",
            Role::CaptionPara => "caption_para",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "query" => Role::Query,
            "image" => Role::Image,
            "caption" => Role::Caption,
            "image_aug" => Role::ImageAug,
            "caption_bt" => Role::CaptionBt,
            "caption_para" => Role::CaptionPara,
            other => return Err(format!("unknown role {other:?}")),
        })
    }
}

/// Builds a record key.
pub fn make_key(sample_id: &str, role: Role, variant: &str) -> String {
    format!("{sample_id}/{}/{variant}", role.as_str())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub key: String,
    pub role: Role,
    pub dim: usize,
    pub vector: Vec<f64>,
    /// Set for caption records when the encoder cut the caption short.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncated: Option<bool>,
}

impl EmbeddingRecord {
    pub fn new(key: impl Into<String>, role: Role, vector: Vec<f64>) -> Self {
        Self {
            key: key.into(),
            role,
            dim: vector.len(),
            vector,
            truncated: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    pub format: String,
    pub encoder: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sidecar_version: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    meta: StoreMeta,
    records: IndexMap<String, EmbeddingRecord>,
}

fn validate_key(key: &str) -> Result<(), StoreError> {
    let ok = key.is_ascii() && key.split('/').count() >= 3 && key.split('/').all(|p| !p.is_empty());
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidKey(key.to_string()))
    }
}

impl EmbeddingStore {
    pub fn new(encoder: impl Into<String>, dim: usize) -> Self {
        Self {
            meta: StoreMeta {
                format: FORMAT_TAG.into(),
                encoder: encoder.into(),
                dim,
                created: None,
                sidecar_version: None,
            },
            records: IndexMap::new(),
        }
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut StoreMeta {
        &mut self.meta
    }

    pub fn dim(&self) -> usize {
        self.meta.dim
    }

    pub fn encoder(&self) -> &str {
        &self.meta.encoder
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &EmbeddingRecord> {
        self.records.values()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.records.contains_key(key)
    }

    /// Adds a record after checking key syntax, dim and finiteness.
    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<(), StoreError> {
        validate_key(&record.key)?;
        if record.dim != self.meta.dim || record.vector.len() != self.meta.dim {
            return Err(StoreError::DimMismatch {
                key: record.key,
                expected: self.meta.dim,
                found: if record.dim != self.meta.dim {
                    record.dim
                } else {
                    record.vector.len()
                },
            });
        }
        if let Some(index) = record.vector.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite {
                key: record.key,
                index,
            });
        }
        if self.records.contains_key(&record.key) {
            return Err(StoreError::DuplicateKey(record.key));
        }
        self.records.insert(record.key.clone(), record);
        Ok(())
    }

    pub fn record(&self, key: &str) -> Result<&EmbeddingRecord, StoreError> {
        self.records.get(key).ok_or_else(|| StoreError::Missing {
            key: key.to_string(),
            nearest: self.nearest_keys(key, 3),
        })
    }

    pub fn get(&self, key: &str) -> Result<&[f64], StoreError> {
        self.record(key).map(|r| r.vector.as_slice())
    }

    pub fn try_get(&self, key: &str) -> Option<&[f64]> {
        self.records.get(key).map(|r| r.vector.as_slice())
    }

    /// Keys sharing the longest prefix with `key`.
    fn nearest_keys(&self, key: &str, n: usize) -> Vec<String> {
        let shared = |k: &str| {
            k.bytes()
                .zip(key.bytes())
                .take_while(|(a, b)| a == b)
                .count()
        };
        let mut scored: Vec<(usize, &String)> =
            self.records.keys().map(|k| (shared(k), k)).collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        scored.into_iter().take(n).map(|(_, k)| k.clone()).collect()
    }

    /// Every record needed to rank `sample` with the queries of `llm_name`.
    pub fn get_sample_bundle(
        &self,
        sample: &Sample,
        llm_name: &str,
    ) -> Result<SampleBundle<'_>, StoreError> {
        let sid = &sample.sample_id;
        let query = self.get(&make_key(sid, Role::Query, llm_name))?;
        let optional = |role: Role, image_id: &str| self.try_get(&make_key(sid, role, image_id));
        let candidates = sample
            .candidates
            .iter()
            .map(|c| {
                Ok(CandidateVectors {
                    image_id: c.image_id.clone(),
                    image: self.get(&make_key(sid, Role::Image, &c.image_id))?,
                    caption: optional(Role::Caption, &c.image_id),
                    image_aug: optional(Role::ImageAug, &c.image_id),
                    caption_bt: optional(Role::CaptionBt, &c.image_id),
                    caption_para: optional(Role::CaptionPara, &c.image_id),
                })
            })
            .collect::<Result<Vec<_>, StoreError>>()?;
        Ok(SampleBundle {
            sample_id: sid.clone(),
            llm_name: llm_name.to_string(),
            query,
            candidates,
        })
    }

    /// Parses a store from any reader.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, StoreError> {
        let mut lines = BufReader::new(reader).lines().enumerate();
        let format_err = |line: usize, message: String| StoreError::Format { line, message };
        let (_, header) = lines
            .next()
            .ok_or_else(|| format_err(1, "empty file, expected header".into()))?;
        let header = header.map_err(|e| format_err(1, e.to_string()))?;
        let meta: StoreMeta =
            serde_json::from_str(&header).map_err(|e| format_err(1, format!("bad header: {e}")))?;
        if meta.format != FORMAT_TAG {
            return Err(format_err(
                1,
                format!("unsupported format {:?}", meta.format),
            ));
        }
        if meta.dim == 0 {
            return Err(format_err(1, "dim must be positive".into()));
        }
        let mut store = Self {
            meta,
            records: IndexMap::new(),
        };
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line.map_err(|e| format_err(line_no, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: EmbeddingRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => return Err(non_finite_or(&line, format_err(line_no, e.to_string()))),
            };
            store.insert(record)?;
        }
        Ok(store)
    }

    pub fn read(path: &Path) -> Result<Self, StoreError> {
        let file = fs::File::open(path).map_err(|source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_reader(file)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        serde_json::to_writer(&mut out, &self.meta)?;
        out.write_all(b"\n")?;
        for record in self.records.values() {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    /// Writes the whole store to a temporary sibling, then renames it into place.
    pub fn write(&self, path: &Path) -> Result<(), StoreError> {
        let io_err = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(io_err)?;
        fs::rename(&tmp, path).map_err(io_err)
    }
}

/// Python's `json` module writes NaN/Infinity as bare tokens; report those as
/// non-finite values instead of generic parse failures.
fn non_finite_or(line: &str, fallback: StoreError) -> StoreError {
    if !(line.contains("NaN") || line.contains("Infinity")) {
        return fallback;
    }
    let patched = line
        .replace("-Infinity", "null")
        .replace("Infinity", "null")
        .replace("NaN", "null");
    let Ok(value) = serde_json::from_str::<serde_json::Value>(&patched) else {
        return fallback;
    };
    let key = value["key"].as_str().unwrap_or("?").to_string();
    let index = value["vector"]
        .as_array()
        .and_then(|v| v.iter().position(|x| x.is_null()))
        .unwrap_or(0);
    StoreError::NonFinite { key, index }
}

#[derive(Debug, Clone)]
pub struct CandidateVectors<'a> {
    pub image_id: String,
    pub image: &'a [f64],
    pub caption: Option<&'a [f64]>,
    pub image_aug: Option<&'a [f64]>,
    pub caption_bt: Option<&'a [f64]>,
    pub caption_para: Option<&'a [f64]>,
}

impl CandidateVectors<'_> {
    fn record_count(&self) -> usize {
        1 + [
            self.caption,
            self.image_aug,
            self.caption_bt,
            self.caption_para,
        ]
        .iter()
        .filter(|v| v.is_some())
        .count()
    }
}

/// Borrowed views of the vectors needed to rank one sample.
#[derive(Debug, Clone)]
pub struct SampleBundle<'a> {
    pub sample_id: String,
    pub llm_name: String,
    pub query: &'a [f64],
    /// In the sample's candidate order.
    pub candidates: Vec<CandidateVectors<'a>>,
}

impl SampleBundle<'_> {
    pub fn record_count(&self) -> usize {
        1 + self
            .candidates
            .iter()
            .map(CandidateVectors::record_count)
            .sum::<usize>()
    }
}
