//! Run configuration: one TOML document, overridden by command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use idiorank::head::{GridAxes, TrainConfig};
use idiorank::llmgate::{HttpConfig, PromptConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Context, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: Option<String>,
    pub runs_dir: Option<PathBuf>,
    /// Root seed; every random stream is derived from it by label.
    #[serde(default)]
    pub seed: u64,
    /// Split name → dataset JSON.
    #[serde(default)]
    pub data: BTreeMap<String, PathBuf>,
    /// Verify that every candidate image exists when loading datasets.
    #[serde(default)]
    pub check_images: bool,
    #[serde(default)]
    pub llm: BTreeMap<String, LlmSpec>,
    /// Store name → emb-jsonl/1 file.
    #[serde(default)]
    pub stores: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub classify: ClassifySection,
    #[serde(default)]
    pub prompts: Option<PromptConfig>,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub grid: Option<GridAxes>,
    #[serde(default)]
    pub report: ReportSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmSpec {
    /// Scripted responses for a mock transport.
    pub fixture: Option<PathBuf>,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: Option<String>,
    pub timeout_secs: Option<u64>,
    pub max_attempts: Option<u32>,
    /// Cache HTTP responses inside the run directory. Defaults to true.
    pub cache: Option<bool>,
}

impl LlmSpec {
    pub fn http_config(&self, name: &str) -> Result<HttpConfig> {
        let base_url = self.base_url.clone().ok_or_else(|| {
            CliError::validation(format!("llm {name}: set either `fixture` or `base_url`"))
        })?;
        let mut config = HttpConfig::new(
            base_url,
            self.model.clone().unwrap_or_else(|| name.to_string()),
        );
        if let Some(v) = &self.api_key_env {
            config.api_key_env = v.clone();
        }
        if let Some(v) = self.timeout_secs {
            config.timeout_secs = v;
        }
        if let Some(v) = self.max_attempts {
            config.max_attempts = v;
        }
        Ok(config)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifySection {
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_t() -> usize {
    5
}

fn default_in_flight() -> usize {
    4
}

impl Default for ClassifySection {
    fn default() -> Self {
        Self {
            t: default_t(),
            max_in_flight: default_in_flight(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = idiorank::corpus::SplitSpec::default();
        Self {
            train_frac: d.train_frac,
            val_frac: d.val_frac,
            test_frac: d.test_frac,
        }
    }
}

/// Training overrides; unset fields come from the preset, then the defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub preset: Option<String>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub k_soft: Option<usize>,
    pub tau: Option<f64>,
    pub dropout_rate: Option<f64>,
    pub hidden: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub resample_per_epoch: Option<bool>,
    /// Split names used for training, validation and test-accuracy curves.
    pub train_split: Option<String>,
    pub val_split: Option<String>,
    pub test_split: Option<String>,
    /// Add caption similarity when probing test accuracy.
    pub probe_captions: Option<bool>,
}

impl TrainSection {
    /// Fields set in `other` win.
    pub fn overlay(&self, other: &TrainSection) -> TrainSection {
        macro_rules! pick {
            ($($f:ident),*) => { TrainSection { $($f: other.$f.clone().or_else(|| self.$f.clone()),)* } };
        }
        pick!(
            preset,
            batch_size,
            learning_rate,
            k_soft,
            tau,
            dropout_rate,
            hidden,
            max_epochs,
            patience,
            resample_per_epoch,
            train_split,
            val_split,
            test_split,
            probe_captions
        )
    }

    pub fn resolve(&self, llm: &str, seed: u64) -> Result<TrainConfig> {
        let base = match &self.preset {
            Some(p) => TrainConfig::preset(p)
                .ok_or_else(|| CliError::validation(format!("unknown preset {p:?}")))?,
            None => TrainConfig::preset(llm).unwrap_or_default(),
        };
        let config = TrainConfig {
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            k_soft: self.k_soft.unwrap_or(base.k_soft),
            tau: self.tau.unwrap_or(base.tau),
            dropout_rate: self.dropout_rate.unwrap_or(base.dropout_rate),
            hidden: self.hidden.unwrap_or(base.hidden),
            max_epochs: self.max_epochs.unwrap_or(base.max_epochs),
            patience: self.patience.unwrap_or(base.patience),
            resample_per_epoch: self.resample_per_epoch.unwrap_or(base.resample_per_epoch),
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn train_split(&self) -> &str {
        self.train_split.as_deref().unwrap_or("train")
    }

    pub fn val_split(&self) -> &str {
        self.val_split.as_deref().unwrap_or("val")
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Report columns, in order. Defaults to every split with rankings.
    #[serde(default)]
    pub splits: Vec<String>,
    /// Pooled columns: name → splits, weighted by sample count.
    #[serde(default)]
    pub combined: BTreeMap<String, Vec<String>>,
    pub gains: Option<Vec<f64>>,
    #[serde(default)]
    pub require_complete: bool,
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).context(format!("reading config {}", path.display()))?;
        let mut config: RunConfig =
            toml::from_str(&text).context(format!("parsing config {}", path.display()))?;
        let absolute = std::path::absolute(path).context("resolving config path")?;
        let base = absolute.parent().unwrap_or(Path::new("/")).to_path_buf();
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        config.data.values_mut().for_each(rebase);
        config.stores.values_mut().for_each(rebase);
        config
            .llm
            .values_mut()
            .filter_map(|l| l.fixture.as_mut())
            .for_each(rebase);
        if let Some(p) = config.runs_dir.as_mut() {
            rebase(p);
        }
        Ok(config)
    }
}
