use std::fs;
use std::path::{Path, PathBuf};

use hookmem_core::dataset::{SchemaKind, SyntheticConfig};
use hookmem_core::network::NetworkConfig;
use hookmem_core::pipeline::EditConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Zsre,
    Counterfact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    /// Records to generate, or the cap on ingested records (0 keeps all of
    /// them).
    pub n_records: usize,
    /// Raw JSON for the ingested sources.
    pub input: Option<PathBuf>,
    /// JSON-lines dataset written by `generate` and read by the other verbs.
    /// Defaults to `dataset.jsonl` in the output directory.
    pub path: Option<PathBuf>,
    pub seed: u64,
    pub prompt_len: usize,
    pub rephrase_noise: f64,
    pub filler_tokens: usize,
    pub subject_span: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let s = SyntheticConfig::default();
        Self {
            source: DatasetSource::Synthetic,
            n_records: 1000,
            input: None,
            path: None,
            seed: s.seed,
            prompt_len: s.prompt_len,
            rephrase_noise: s.rephrase_noise,
            filler_tokens: s.filler_tokens,
            subject_span: s.subject_span,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
    /// Evaluate every this many steps (the final step is always evaluated).
    /// 0 evaluates only the final step.
    pub eval_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("runs/default"),
            formats: vec![Format::Csv, Format::Json, Format::Svg],
            eval_every: 10,
        }
    }
}

impl OutputConfig {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub editing: EditConfig,
    pub dataset: DatasetConfig,
    pub output: OutputConfig,
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_scalar(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `path` (dotted) to `raw` inside `table`, creating tables on the way.
pub fn set_path(table: &mut toml::Table, path: &str, raw: &str) -> Result<(), CliError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override path `{path}`")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{p}` in `{path}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_scalar(raw));
    Ok(())
}

impl RunConfig {
    pub fn from_table(table: toml::Table) -> Result<Self, CliError> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    /// Reads `path` (if given), applies `key.path=value` overrides and
    /// validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(CliError::io(p))?;
                text.parse::<toml::Table>()
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut table, k.trim(), v.trim())?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.network.validate()?;
        self.editing.validate(self.network.n_blocks)?;
        let d = &self.dataset;
        if d.source != DatasetSource::Synthetic && d.input.is_none() {
            return Err(CliError::Config("dataset.input is required for ingested sources".into()));
        }
        if !(0.0..=1.0).contains(&d.rephrase_noise) {
            return Err(CliError::Config("dataset.rephrase_noise must lie in [0, 1]".into()));
        }
        if self.output.formats.is_empty() {
            return Err(CliError::Config("output.formats is empty".into()));
        }
        Ok(())
    }

    /// One seed for every random stream of the run.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.network.seed = seed;
        self.editing.seed = seed;
        self.dataset.seed = seed;
        self
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset
            .path
            .clone()
            .unwrap_or_else(|| self.output.directory.join("dataset.jsonl"))
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        let d = &self.dataset;
        SyntheticConfig {
            vocab_size: self.network.vocab_size,
            prompt_len: d.prompt_len,
            rephrase_noise: d.rephrase_noise,
            seed: d.seed,
            filler_tokens: d.filler_tokens,
            subject_span: d.subject_span,
        }
    }

    pub fn schema(&self) -> Option<SchemaKind> {
        match self.dataset.source {
            DatasetSource::Synthetic => None,
            DatasetSource::Zsre => Some(SchemaKind::Zsre),
            DatasetSource::Counterfact => Some(SchemaKind::Counterfact),
        }
    }

    /// sha256 of the canonical JSON form. The output directory is left out
    /// so that a run moved elsewhere keeps its hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.directory = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
