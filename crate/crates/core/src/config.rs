//! Run configuration: one TOML file with a section per stage.
//!
//! `[run]` with `output_dir` and `seed` is required; every other section and
//! key falls back to its default. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dpo::DpoConfig;
use crate::env::TaskConfig;
use crate::error::{Error, Result};
use crate::grpo::GrpoConfig;
use crate::policy::PromptVariant;
use crate::pool::PoolConfig;
use crate::seed::{config_hash, Provenance};
use crate::sft::SftConfig;
use crate::suite::{SuiteConfig, SuiteOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Seeds for `suite`; defaults to `[seed]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suite_seeds: Option<Vec<u64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    Sft,
    Dpo,
    Grpo,
}

impl Checkpoint {
    pub fn file_name(self) -> &'static str {
        match self {
            Checkpoint::Sft => "sft.ckpt",
            Checkpoint::Dpo => "dpo.ckpt",
            Checkpoint::Grpo => "grpo.ckpt",
        }
    }
}

/// Inputs of the single-stage subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagesSection {
    pub grpo_init: Checkpoint,
    pub eval_checkpoint: Checkpoint,
    pub eval_variant: PromptVariant,
}

impl Default for StagesSection {
    fn default() -> Self {
        Self {
            grpo_init: Checkpoint::Sft,
            eval_checkpoint: Checkpoint::Grpo,
            eval_variant: PromptVariant::WithContext,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub sft: SftConfig,
    #[serde(default)]
    pub pool: PoolConfig,
    #[serde(default)]
    pub dpo: DpoConfig,
    #[serde(default)]
    pub grpo: GrpoConfig,
    #[serde(default)]
    pub suite: SuiteOptions,
    #[serde(default)]
    pub stages: StagesSection,
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Parse {
            what: "config",
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            msg: e.message().to_string(),
        })?;
        cfg.task.validate()?;
        cfg.grpo.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Canonical TOML rendering (defaults filled in).
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(config_hash(&self.canonical()), self.run.seed)
    }

    pub fn suite_config(&self) -> SuiteConfig {
        SuiteConfig {
            task: self.task.clone(),
            sft: self.sft.clone(),
            pool: self.pool.clone(),
            dpo: self.dpo.clone(),
            grpo: self.grpo.clone(),
            suite: self.suite.clone(),
        }
    }

    pub fn suite_seeds(&self) -> Vec<u64> {
        self.run.suite_seeds.clone().unwrap_or_else(|| vec![self.run.seed])
    }
}
