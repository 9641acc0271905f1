//! Task datasets: loading, validation, splitting and TSV ingestion.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Number of candidate images attached to every sample.
pub const CANDIDATES_PER_SAMPLE: usize = 5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed dataset JSON at line {line}, column {column}: {message}\n  {context}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
        context: String,
    },
    #[error("sample {sample_id}: {reason}")]
    InvalidSample { sample_id: String, reason: String },
    #[error("dataset declares language {found}, expected {expected}")]
    LanguageMismatch { expected: Language, found: Language },
    #[error("{} image file(s) missing: {}", .0.len(), display_paths(.0))]
    MissingImages(Vec<PathBuf>),
    #[error("cannot split an empty dataset")]
    EmptySplit,
    #[error("invalid split fractions: {0}")]
    InvalidSplit(String),
    #[error("TSV ingest: {0}")]
    Ingest(String),
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| p.display().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Language {
    #[serde(rename = "EN")]
    En,
    #[serde(rename = "PT")]
    Pt,
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::En => "EN",
            Language::Pt => "PT",
        })
    }
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "EN" => Ok(Language::En),
            "PT" => Ok(Language::Pt),
            other => Err(format!("unknown language {other:?} (expected EN or PT)")),
        }
    }
}

/// Whether a compound is used idiomatically or literally in its sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompoundType {
    Idiomatic,
    Literal,
}

impl fmt::Display for CompoundType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CompoundType::Idiomatic => "idiomatic",
            CompoundType::Literal => "literal",
        })
    }
}

impl FromStr for CompoundType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "idiomatic" => Ok(CompoundType::Idiomatic),
            "literal" => Ok(CompoundType::Literal),
            other => Err(format!("unknown compound type {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateImage {
    pub image_id: String,
    /// Relative to the directory holding the dataset file.
    pub image_path: String,
    /// Full caption; truncation for the encoder happens at embedding time.
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub compound: String,
    pub sentence: String,
    #[serde(skip)]
    pub language: Option<Language>,
    #[serde(default)]
    pub gold_type: Option<CompoundType>,
    #[serde(default)]
    pub gold_order: Option<Vec<String>>,
    pub candidates: Vec<CandidateImage>,
}

impl Sample {
    pub fn candidate_ids(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.image_id.as_str())
    }

    /// Position of `image_id` among the candidates.
    pub fn candidate_index(&self, image_id: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c.image_id == image_id)
    }

    /// The gold most-representative image, when labelled.
    pub fn gold_top(&self) -> Option<&str> {
        self.gold_order
            .as_ref()
            .and_then(|o| o.first())
            .map(String::as_str)
    }

    /// Checks every structural invariant of a sample.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |reason: String| CorpusError::InvalidSample {
            sample_id: self.sample_id.clone(),
            reason,
        };
        if self.sample_id.trim().is_empty() {
            return Err(invalid("empty sample_id".into()));
        }
        if self.compound.trim().is_empty() {
            return Err(invalid("empty compound".into()));
        }
        if self.sentence.trim().is_empty() {
            return Err(invalid("empty sentence".into()));
        }
        if self.candidates.len() != CANDIDATES_PER_SAMPLE {
            return Err(invalid(format!(
                "expected {CANDIDATES_PER_SAMPLE} candidates, found {}",
                self.candidates.len()
            )));
        }
        let mut ids = HashSet::new();
        for c in &self.candidates {
            if !ids.insert(c.image_id.as_str()) {
                return Err(invalid(format!("duplicate image_id {:?}", c.image_id)));
            }
            if c.caption.trim().is_empty() {
                return Err(invalid(format!("empty caption for {:?}", c.image_id)));
            }
        }
        if let Some(order) = &self.gold_order {
            let seen: HashSet<&str> = order.iter().map(String::as_str).collect();
            if order.len() != CANDIDATES_PER_SAMPLE || seen.len() != order.len() || seen != ids {
                return Err(invalid(format!(
                    "gold_order {order:?} is not a permutation of the candidate ids"
                )));
            }
        }
        Ok(())
    }
}

/// On-disk dataset document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub language: Language,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    /// Check that every `image_path` exists next to the dataset file.
    pub check_images: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { check_images: true }
    }
}

pub fn load_dataset(path: &Path, language: Language) -> Result<Vec<Sample>, CorpusError> {
    load_dataset_with(path, language, LoadOptions::default())
}

pub fn load_dataset_with(
    path: &Path,
    language: Language,
    options: LoadOptions,
) -> Result<Vec<Sample>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let dataset = parse_dataset(&text)?;
    if dataset.language != language {
        return Err(CorpusError::LanguageMismatch {
            expected: language,
            found: dataset.language,
        });
    }
    if options.check_images {
        let root = path.parent().unwrap_or_else(|| Path::new("."));
        let missing: Vec<PathBuf> = dataset
            .samples
            .iter()
            .flat_map(|s| s.candidates.iter())
            .map(|c| root.join(&c.image_path))
            .filter(|p| !p.is_file())
            .collect();
        if !missing.is_empty() {
            return Err(CorpusError::MissingImages(missing));
        }
    }
    Ok(dataset.samples)
}

/// Parses and validates a dataset document held in memory.
pub fn parse_dataset(text: &str) -> Result<Dataset, CorpusError> {
    let mut dataset: Dataset = serde_json::from_str(text).map_err(|e| {
        let context = text
            .lines()
            .nth(e.line().saturating_sub(1))
            .unwrap_or_default()
            .chars()
            .take(120)
            .collect();
        CorpusError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
            context,
        }
    })?;
    let mut ids = HashSet::new();
    for sample in &mut dataset.samples {
        sample.language = Some(dataset.language);
        sample.validate()?;
        if !ids.insert(sample.sample_id.clone()) {
            return Err(CorpusError::InvalidSample {
                sample_id: sample.sample_id.clone(),
                reason: "duplicate sample_id".into(),
            });
        }
    }
    Ok(dataset)
}

/// Serializes a dataset in the canonical layout.
pub fn dataset_to_json(language: Language, samples: &[Sample]) -> String {
    let doc = Dataset {
        language,
        samples: samples.to_vec(),
    };
    let mut out = serde_json::to_string_pretty(&doc).expect("dataset serializes");
    out.push('\n');
    out
}

pub fn save_dataset(
    path: &Path,
    language: Language,
    samples: &[Sample],
) -> Result<(), CorpusError> {
    fs::write(path, dataset_to_json(language, samples)).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn check(&self) -> Result<(), CorpusError> {
        let fracs = [self.train_frac, self.val_frac, self.test_frac];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(CorpusError::InvalidSplit(format!(
                "{fracs:?} outside [0, 1]"
            )));
        }
        let sum: f64 = fracs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSplit(format!("fractions sum to {sum}")));
        }
        Ok(())
    }

    /// (train, val, test) sizes for `n` samples. Validation and test sizes are
    /// rounded; train takes the remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let val = ((n as f64) * self.val_frac).round() as usize;
        let test = ((n as f64) * self.test_frac).round() as usize;
        let test = test.min(n - val.min(n));
        let val = val.min(n);
        (n - val - test, val, test)
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.70,
            val_frac: 0.10,
            test_frac: 0.20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Seeded partition into train/val/test. Each part keeps the input order.
pub fn split_dataset(samples: &[Sample], spec: &SplitSpec) -> Result<Splits, CorpusError> {
    if samples.is_empty() {
        return Err(CorpusError::EmptySplit);
    }
    spec.check()?;
    let n = samples.len();
    let (n_train, n_val, _) = spec.sizes(n);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng_for(spec.seed, "split"));

    // 0 = train, 1 = val, 2 = test
    let mut bucket = vec![0u8; n];
    for (rank, &idx) in perm.iter().enumerate() {
        bucket[idx] = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
    }
    let pick = |b: u8| -> Vec<Sample> {
        samples
            .iter()
            .zip(&bucket)
            .filter(|(_, &k)| k == b)
            .map(|(s, _)| s.clone())
            .collect()
    };
    Ok(Splits {
        train: pick(0),
        val: pick(1),
        test: pick(2),
    })
}

/// Column names used when converting a task TSV into the canonical JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnMap {
    pub compound: String,
    pub sentence: String,
    /// Optional gold compound type column.
    pub sentence_type: Option<String>,
    /// Optional gold order column, a list literal such as `['a.png', 'b.png']`.
    pub expected_order: Option<String>,
    /// Optional id column; rows are numbered `s<row>` when absent.
    pub sample_id: Option<String>,
    /// Column name patterns with `{k}` standing for 1..=5.
    pub image_name: String,
    pub image_caption: String,
    /// Relative image path template; `{compound}` and `{image}` are substituted.
    pub image_path: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            compound: "compound".into(),
            sentence: "sentence".into(),
            sentence_type: Some("sentence_type".into()),
            expected_order: Some("expected_order".into()),
            sample_id: None,
            image_name: "image{k}_name".into(),
            image_caption: "image{k}_caption".into(),
            image_path: "{compound}/{image}".into(),
        }
    }
}

/// Converts a tab-separated task file into validated samples.
pub fn ingest_tsv(text: &str, columns: &ColumnMap) -> Result<Vec<Sample>, CorpusError> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| CorpusError::Ingest(e.to_string()))?
        .clone();
    let col = |name: &str| -> Result<usize, CorpusError> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CorpusError::Ingest(format!("missing column {name:?}")))
    };
    let compound_col = col(&columns.compound)?;
    let sentence_col = col(&columns.sentence)?;
    let type_col = columns.sentence_type.as_deref().map(col).transpose()?;
    let order_col = columns.expected_order.as_deref().map(col).transpose()?;
    let id_col = columns.sample_id.as_deref().map(col).transpose()?;
    let image_cols = (1..=CANDIDATES_PER_SAMPLE)
        .map(|k| {
            let name = columns.image_name.replace("{k}", &k.to_string());
            let caption = columns.image_caption.replace("{k}", &k.to_string());
            Ok((col(&name)?, col(&caption)?))
        })
        .collect::<Result<Vec<_>, CorpusError>>()?;

    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CorpusError::Ingest(format!("row {}: {e}", row + 1)))?;
        let field = |i: usize| record.get(i).unwrap_or_default().trim().to_string();
        let compound = field(compound_col);
        let sample_id = match id_col {
            Some(i) => field(i),
            None => format!("s{}", row + 1),
        };
        let candidates = image_cols
            .iter()
            .map(|&(name_col, caption_col)| {
                let image = field(name_col);
                CandidateImage {
                    image_id: image.clone(),
                    image_path: columns
                        .image_path
                        .replace("{compound}", &compound)
                        .replace("{image}", &image),
                    caption: field(caption_col),
                }
            })
            .collect();
        let gold_type = match type_col.map(field) {
            Some(v) if !v.is_empty() => Some(
                v.parse()
                    .map_err(|e| CorpusError::Ingest(format!("row {}: {e}", row + 1)))?,
            ),
            _ => None,
        };
        let gold_order = order_col
            .map(field)
            .filter(|v| !v.is_empty())
            .map(|v| parse_list_literal(&v));
        let sample = Sample {
            sample_id,
            compound,
            sentence: field(sentence_col),
            language: None,
            gold_type,
            gold_order,
            candidates,
        };
        sample.validate()?;
        samples.push(sample);
    }
    Ok(samples)
}

/// Parses `['a', "b", c]` into its items.
fn parse_list_literal(text: &str) -> Vec<String> {
    text.trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|item| {
            item.trim()
                .trim_matches(|c| c == '\'' || c == '"')
                .to_string()
        })
        .filter(|item| !item.is_empty())
        .collect()
}
