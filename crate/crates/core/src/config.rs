//! Experiment configuration files and the bundled presets.
//!
//! Every field has a default and unknown keys are rejected, so a typo fails
//! loudly instead of silently falling back to a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accounting::TrainingSchedule;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Precision;
use crate::train::{pair_sentences, read_sequences, read_text, Example, SyntheticCorpus, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated Markov-chain sentence pairs.
    #[default]
    Synthetic,
    /// One sentence of integer token ids per line.
    Sequences,
    /// One sentence of raw text per line.
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    /// Synthetic pairs to generate, evaluation pairs included.
    pub examples: usize,
    /// Successors per token in the synthetic chain.
    pub branching: usize,
    /// Pairs held out for evaluation, capped at a fifth of the data.
    pub eval_examples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            path: None,
            examples: 2000,
            branching: 3,
            eval_examples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Run the attention analysis after training.
    pub enabled: bool,
    pub max_sequences: usize,
    pub heatmaps: bool,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            enabled: false,
            max_sequences: 1000,
            heatmaps: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub precision: Precision,
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub training: TrainConfig,
    /// Full-scale phases used for FLOP accounting.
    pub schedule: TrainingSchedule,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
}

/// Bundled presets as `(name, json)`.
pub const PRESETS: &[(&str, &str)] = &[
    ("bert-small", include_str!("../configs/bert-small.json")),
    ("bert-medium", include_str!("../configs/bert-medium.json")),
    ("bert-base", include_str!("../configs/bert-base.json")),
    ("bert-large", include_str!("../configs/bert-large.json")),
    ("groupbert-small", include_str!("../configs/groupbert-small.json")),
    ("groupbert-medium", include_str!("../configs/groupbert-medium.json")),
    ("groupbert-base", include_str!("../configs/groupbert-base.json")),
    ("groupbert-large", include_str!("../configs/groupbert-large.json")),
    ("toy-bert", include_str!("../configs/toy-bert.json")),
    ("toy-groupbert", include_str!("../configs/toy-groupbert.json")),
];

pub fn preset_json(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, j)| *j)
}

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|(n, _)| *n)
}

impl ExperimentConfig {
    /// Parse and validate, failing if any top-level key in `required` is absent.
    pub fn from_json(text: &str, required: &[&str]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let object = value
            .as_object()
            .ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
        let missing: Vec<String> = required
            .iter()
            .filter(|k| !object.contains_key(**k))
            .map(|k| format!("missing key `{k}`"))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(missing.join("; ")));
        }
        let config: ExperimentConfig = serde_json::from_value(value)?;
        config.validate()?;
        Ok(config)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let json = preset_json(name).ok_or_else(|| Error::Config(format!("no bundled preset named `{name}`")))?;
        Self::from_json(json, &[])
    }

    /// Read `spec` as a file path, or as a preset name when no such file exists.
    pub fn load(spec: &str, required: &[&str]) -> Result<Self> {
        let path = Path::new(spec);
        if path.is_file() {
            let text = std::fs::read_to_string(path)?;
            let mut config = Self::from_json(&text, required)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if config.name.is_empty() {
                config.name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            }
            if let (Some(data), Some(dir)) = (config.data.path.as_mut(), path.parent()) {
                if data.is_relative() {
                    *data = dir.join(&*data);
                }
            }
            Ok(config)
        } else if let Some(json) = preset_json(spec) {
            Self::from_json(json, required)
        } else {
            Err(Error::Config(format!(
                "`{spec}` is neither a readable file nor a bundled preset (available: {})",
                preset_names().collect::<Vec<_>>().join(", ")
            )))
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut collect = |r: Result<()>| match r {
            Ok(()) => {}
            Err(Error::Config(m)) => problems.push(m),
            Err(e) => problems.push(e.to_string()),
        };
        collect(self.model.validate());
        collect(self.training.validate());
        collect(self.schedule.validate());
        if self.training.seq_len > self.model.max_positions {
            problems.push(format!(
                "training.seq_len {} exceeds model.max_positions {}",
                self.training.seq_len, self.model.max_positions
            ));
        }
        if self.data.source != DataSource::Synthetic && self.data.path.is_none() {
            problems.push("data.path is required for sequence and text sources".into());
        }
        if self.data.source == DataSource::Synthetic && self.data.eval_examples >= self.data.examples {
            problems.push("data.eval_examples must be smaller than data.examples".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Seed for one stochastic consumer of the run.
    pub fn derived_seed(&self, purpose: SeedPurpose) -> u64 {
        self.seed.wrapping_mul(4).wrapping_add(purpose as u64)
    }

    /// Training and evaluation pairs.
    pub fn load_data(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        let seed = self.derived_seed(SeedPurpose::Data);
        let seq_len = self.training.seq_len;
        let mut all = match self.data.source {
            DataSource::Synthetic => SyntheticCorpus {
                vocab_size: self.model.vocab_size,
                seq_len,
                examples: self.data.examples,
                branching: self.data.branching,
                seed: None,
            }
            .generate(seed)?,
            DataSource::Sequences => {
                let path = self.data.path.as_deref().expect("validated");
                pair_sentences(&read_sequences(path, self.model.vocab_size)?, seq_len, seed)?
            }
            DataSource::Text => {
                let path = self.data.path.as_deref().expect("validated");
                pair_sentences(&read_text(path, self.model.vocab_size)?.1, seq_len, seed)?
            }
        };
        let eval = self.data.eval_examples.min(all.len() / 5);
        let held_out = all.split_off(all.len() - eval);
        Ok((all, held_out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedPurpose {
    Init = 0,
    Data = 1,
    Training = 2,
}
