//! Versioned TOML experiment configuration; paths resolve relative to the
//! config file's directory, and command-line flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sparselex::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_ENV_VAR: &str = "SPARSELEX_CONFIG";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Vocabulary size |V|; BERT-style tokenizers use 30522, desk default 1000.
    pub vocab_size: usize,
    /// Encoder hidden width; transformer-scale is 768, desk default 32.
    pub hidden: usize,
    /// Impact quantization scale (weights are multiplied by this and rounded).
    pub scale: u32,
    /// Top-k applied when masking vectors at inference time.
    pub mask_k: u32,
    pub paths: ExperimentPaths,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPaths {
    pub params: PathBuf,
    pub triples: PathBuf,
    pub history: PathBuf,
    pub corpus: PathBuf,
    pub queries: PathBuf,
    pub qrels: PathBuf,
    pub run: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if config.version != CONFIG_VERSION {
            bail!(
                "unsupported config version {} (expected {})",
                config.version,
                CONFIG_VERSION
            );
        }
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for p in [
            &mut config.paths.params,
            &mut config.paths.triples,
            &mut config.paths.history,
            &mut config.paths.corpus,
            &mut config.paths.queries,
            &mut config.paths.qrels,
            &mut config.paths.run,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing config")?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Flag beats the SPARSELEX_CONFIG environment variable.
pub fn resolve_config_path(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    if let Ok(p) = std::env::var(CONFIG_ENV_VAR) {
        return Ok(PathBuf::from(p));
    }
    bail!("no config file: pass --config or set {CONFIG_ENV_VAR}");
}
