//! The run configuration file: one TOML document with a section per stage.

use std::path::Path;

use serde::{Deserialize, Serialize};
use stylepo::eval::TTestConfig;
use stylepo::po::{Algo, PoConfig};
use stylepo::policy::{GenerationConfig, PolicyMode, TrainConfig, DEFAULT_EXEMPLARS};
use stylepo::reward::RewardTrainConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: CorpusSection,
    pub paraphrase: TrainConfig,
    pub sft: TrainConfig,
    pub transfer: TransferSection,
    pub reward: RewardTrainConfig,
    /// Overrides on top of the per-algorithm defaults.
    pub po: toml::Table,
    /// Sampling for both inference hops.
    pub generation: GenerationConfig,
    pub eval: TTestConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            corpus: CorpusSection::default(),
            paraphrase: TrainConfig::desk(),
            sft: TrainConfig::desk(),
            transfer: TransferSection::default(),
            reward: RewardTrainConfig::default(),
            po: toml::Table::new(),
            generation: GenerationConfig::inference(0),
            eval: TTestConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub per_style: usize,
    /// Subset of the built-in styles; all of them when empty.
    pub styles: Vec<String>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            per_style: 200,
            styles: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Community,
    Individual,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSection {
    pub mode: ModeName,
    pub n_exemplars: usize,
    /// Inputs longer than this many tokens are segmented.
    pub segment_tokens: usize,
    /// Community mode only: one plain-prompt model per target style instead
    /// of a shared model with style tokens.
    pub per_style_models: bool,
}

impl Default for TransferSection {
    fn default() -> Self {
        TransferSection {
            mode: ModeName::Community,
            n_exemplars: DEFAULT_EXEMPLARS,
            segment_tokens: 128,
            per_style_models: false,
        }
    }
}

impl TransferSection {
    pub fn policy_mode(&self) -> PolicyMode {
        match self.mode {
            ModeName::Community => PolicyMode::Community,
            ModeName::Individual => PolicyMode::Individual {
                n_exemplars: self.n_exemplars,
            },
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                RunConfig::parse(&text)
            }
            None => Ok(RunConfig::default()),
        }
    }

    fn validate(&self) -> Result<(), CliError> {
        self.paraphrase.validate()?;
        self.sft.validate()?;
        self.reward.validate()?;
        self.generation.validate()?;
        if self.transfer.segment_tokens == 0 || self.transfer.n_exemplars == 0 {
            return Err(CliError::Config("transfer.segment_tokens and transfer.n_exemplars must be positive".into()));
        }
        if self.transfer.per_style_models && self.transfer.mode != ModeName::Community {
            return Err(CliError::Config("transfer.per_style_models needs community mode".into()));
        }
        if let Some(algo) = self.po.get("algo") {
            algo.as_str()
                .ok_or_else(|| CliError::Config("po.algo must be a string".into()))?
                .parse::<Algo>()?;
        }
        Ok(())
    }

    /// The algorithm defaults with the `[po]` overrides merged in.
    pub fn po_config(&self, algo: Algo) -> Result<PoConfig, CliError> {
        if let Some(a) = self.po.get("algo").and_then(|v| v.as_str()) {
            if a != algo.as_str() {
                return Err(CliError::Config(format!(
                    "po.algo = {a:?} conflicts with --algo {}",
                    algo.as_str()
                )));
            }
        }
        let mut base = serde_json::to_value(PoConfig::desk(algo)).map_err(stylepo::Error::from)?;
        let overrides = serde_json::to_value(&self.po).map_err(stylepo::Error::from)?;
        merge(&mut base, overrides);
        let config: PoConfig = serde_json::from_value(base).map_err(|e| CliError::Config(format!("[po] {e}")))?;
        config.validate()?;
        Ok(config)
    }
}

fn merge(base: &mut serde_json::Value, overrides: serde_json::Value) {
    match (base, overrides) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
