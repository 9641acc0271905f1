//! Run directory layout, manifests and content-hash skipping.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use idiorank::corpus::{self, Language, LoadOptions, Sample};
use idiorank::embedstore::EmbeddingStore;
use idiorank::llmgate::{CachedTransport, HttpChatTransport, LlmTransport, MockTransport};
use idiorank::seed::sha256_hex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::RunConfig;
use crate::error::{CliError, Context, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub struct Run {
    pub root: PathBuf,
    pub id: String,
    pub seed: u64,
    pub force: bool,
    pub config: RunConfig,
}

/// A dataset split with the file it came from.
pub struct Split {
    pub name: String,
    pub language: Language,
    pub samples: Vec<Sample>,
    pub path: PathBuf,
}

impl Split {
    pub fn golds(&self) -> Result<BTreeMap<String, Vec<String>>> {
        self.samples
            .iter()
            .map(|s| {
                s.gold_order
                    .clone()
                    .map(|g| (s.sample_id.clone(), g))
                    .ok_or_else(|| {
                        CliError::validation(format!(
                            "split {}: sample {} has no gold order",
                            self.name, s.sample_id
                        ))
                    })
            })
            .collect()
    }
}

pub struct Store {
    pub name: String,
    pub store: EmbeddingStore,
    pub path: PathBuf,
}

impl Store {
    /// Encoder name without the projection suffix.
    pub fn clip(&self) -> &str {
        self.store.encoder().trim_end_matches("+head")
    }

    pub fn fine_tuned(&self) -> bool {
        self.store.encoder().ends_with("+head")
    }
}

/// Names end up in file names, so keep them plain.
pub fn check_name(kind: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "{kind} name {name:?} may only use letters, digits, '-', '_' and '.'"
        )))
    }
}

impl Run {
    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    /// Path as recorded in manifests: relative inside the run directory.
    pub fn display(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .display()
            .to_string()
    }

    pub fn split_path(&self, name: &str) -> PathBuf {
        self.config
            .data
            .get(name)
            .cloned()
            .unwrap_or_else(|| self.path(format!("data/{name}.json")))
    }

    pub fn load_split(&self, name: &str) -> Result<Split> {
        check_name("split", name)?;
        let path = self.split_path(name);
        if !path.exists() {
            return Err(CliError::missing(
                &format!("dataset for split {name:?}"),
                &path,
                &format!("ingest --name {name}"),
            ));
        }
        let text = fs::read_to_string(&path).context(format!("reading {}", path.display()))?;
        let language = corpus::parse_dataset(&text)
            .context(format!("loading {}", path.display()))?
            .language;
        let options = LoadOptions {
            check_images: self.config.check_images,
        };
        let samples = corpus::load_dataset_with(&path, language, options)
            .context(format!("loading {}", path.display()))?;
        Ok(Split {
            name: name.to_string(),
            language,
            samples,
            path,
        })
    }

    pub fn store_path(&self, name: &str) -> PathBuf {
        self.config
            .stores
            .get(name)
            .cloned()
            .unwrap_or_else(|| self.path(format!("stores/{name}.emb.jsonl")))
    }

    pub fn open_store(&self, name: &str) -> Result<Store> {
        check_name("store", name)?;
        let path = self.store_path(name);
        if !path.exists() {
            return Err(CliError::validation(format!(
                "store {name:?} not found at {}; list it under [stores] or create it with `idiorank project`",
                path.display()
            )));
        }
        let store =
            EmbeddingStore::read(&path).context(format!("reading store {}", path.display()))?;
        Ok(Store {
            name: name.to_string(),
            store,
            path,
        })
    }

    /// Transport for a configured LLM, plus the files it depends on.
    pub fn transport(&self, llm: &str) -> Result<(Box<dyn LlmTransport>, Vec<PathBuf>, Value)> {
        check_name("llm", llm)?;
        let spec = self.config.llm.get(llm).ok_or_else(|| {
            CliError::validation(format!(
                "llm {llm:?} is not configured; add an [llm.{llm}] table"
            ))
        })?;
        if let Some(fixture) = &spec.fixture {
            let mock = MockTransport::from_fixture(llm, fixture)?;
            return Ok((
                Box::new(mock),
                vec![fixture.clone()],
                serde_json::json!({"fixture": true}),
            ));
        }
        let http = spec.http_config(llm)?;
        let description = serde_json::json!({"base_url": http.base_url, "model": http.model});
        let client = HttpChatTransport::new(llm, http)?;
        if spec.cache.unwrap_or(true) {
            let cache = self.path(format!("llm/{llm}/cache.jsonl"));
            create_parent(&cache)?;
            Ok((
                Box::new(CachedTransport::open(client, &cache)?),
                vec![],
                description,
            ))
        } else {
            Ok((Box::new(client), vec![], description))
        }
    }
}

pub fn create_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).context(format!("creating {}", parent.display()))?;
    }
    Ok(())
}

/// Writes through a temporary file so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).context(format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).context(format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("record serializes");
        out.push(b'\n');
    }
    out
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).context(format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).context(format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).context(format!("hashing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub version: String,
    pub run_id: String,
    pub seed: u64,
    pub params: Value,
    /// Path → sha256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Path → sha256 of every file written.
    pub outputs: BTreeMap<String, String>,
    /// Hash of subcommand, version, seed, params and inputs.
    pub digest: String,
    pub created: String,
    #[serde(default)]
    pub summary: Value,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).context(format!("reading {}", path.display()))?;
        serde_json::from_str(&text).context(format!("parsing {}", path.display()))
    }
}

/// One unit of work: declares its inputs, then either proves its outputs
/// current or records them once written.
pub struct Step {
    subcommand: String,
    params: Value,
    inputs: BTreeMap<String, String>,
    manifest: PathBuf,
}

impl Step {
    pub fn new(run: &Run, subcommand: &str, manifest: PathBuf, params: impl Serialize) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            params: serde_json::to_value(params).expect("params serialize"),
            inputs: BTreeMap::new(),
            manifest: run.path(manifest),
        }
    }

    pub fn input(&mut self, run: &Run, path: &Path) -> Result<()> {
        let path = std::path::absolute(path).context(format!("resolving {}", path.display()))?;
        self.inputs.insert(run.display(&path), hash_file(&path)?);
        Ok(())
    }

    pub fn digest(&self, run: &Run) -> String {
        let canonical = serde_json::json!({
            "subcommand": self.subcommand,
            "version": VERSION,
            "seed": run.seed,
            "params": self.params,
            "inputs": self.inputs,
        });
        sha256_hex(canonical.to_string().as_bytes())
    }

    /// True when a previous run with identical inputs left its outputs intact.
    pub fn up_to_date(&self, run: &Run) -> bool {
        if run.force {
            return false;
        }
        let Ok(previous) = Manifest::read(&self.manifest) else {
            return false;
        };
        previous.digest == self.digest(run)
            && previous
                .outputs
                .iter()
                .all(|(p, h)| hash_file(&run.path(p)).map(|x| &x == h).unwrap_or(false))
    }

    pub fn finish(self, run: &Run, outputs: &[PathBuf], summary: Value) -> Result<Manifest> {
        let outputs = outputs
            .iter()
            .map(|p| Ok((run.display(p), hash_file(p)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let manifest = Manifest {
            digest: self.digest(run),
            subcommand: self.subcommand,
            version: VERSION.to_string(),
            run_id: run.id.clone(),
            seed: run.seed,
            params: self.params,
            inputs: self.inputs,
            outputs,
            created: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            summary,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&self.manifest, text.as_bytes())?;
        Ok(manifest)
    }
}
