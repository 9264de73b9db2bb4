//! Pipeline configuration file: one JSON document describing inputs,
//! cleaning, splitting, subword, model, training, and sweep settings.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lugnmt_core::corpus::Direction;
use lugnmt_core::sweep::SearchSpace;
use lugnmt_core::{ModelConfig, SplitSpec, TrainConfig};
use serde::Deserialize;

/// One raw corpus file plus how to read it.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase", deny_unknown_fields)]
pub enum InputSpec {
    Csv {
        path: PathBuf,
        src_column: String,
        tgt_column: String,
        origin: String,
    },
    /// JSON array or JSON-lines, auto-detected.
    Json {
        path: PathBuf,
        src_key: String,
        tgt_key: String,
        origin: String,
    },
}

impl InputSpec {
    pub fn path(&self) -> &Path {
        match self {
            InputSpec::Csv { path, .. } | InputSpec::Json { path, .. } => path,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleanSettings {
    pub max_len_tokens: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpeSettings {
    pub num_merges: usize,
    pub vocab_size: usize,
}

fn default_sweep_budget() -> usize {
    30
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSettings {
    #[serde(default = "default_sweep_budget")]
    pub budget: usize,
    #[serde(default)]
    pub seed: u64,
    /// Caps epochs per trial; falls back to the train section.
    #[serde(default)]
    pub max_epochs: Option<usize>,
    /// Optional grid overrides; each axis defaults to the full range.
    #[serde(default)]
    pub dim_model_choices: Option<Vec<usize>>,
    #[serde(default)]
    pub dim_ff_choices: Option<Vec<usize>>,
    #[serde(default)]
    pub batch_size_choices: Option<Vec<usize>>,
}

impl SweepSettings {
    pub fn space(&self) -> SearchSpace {
        let mut space = SearchSpace::default();
        if let Some(choices) = &self.dim_model_choices {
            space.dim_model_choices = choices.clone();
        }
        if let Some(choices) = &self.dim_ff_choices {
            space.dim_ff_choices = choices.clone();
        }
        if let Some(choices) = &self.batch_size_choices {
            space.batch_size_choices = choices.clone();
        }
        space
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Orientation of the stored corpus: which language the `src` field
    /// holds, e.g. "lu2en".
    pub direction: String,
    pub inputs: Vec<InputSpec>,
    pub clean: CleanSettings,
    pub split: SplitSpec,
    pub bpe: BpeSettings,
    /// Architecture; vocabulary sizes are filled from artifacts.
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default = "default_sweep_settings")]
    pub sweep: SweepSettings,
    pub out_dir: PathBuf,
}

fn default_sweep_settings() -> SweepSettings {
    SweepSettings {
        budget: default_sweep_budget(),
        seed: 0,
        max_epochs: None,
        dim_model_choices: None,
        dim_ff_choices: None,
        batch_size_choices: None,
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: PipelineConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.stored_direction()?;
        Ok(config)
    }

    /// Direction of the stored corpus artifacts.
    pub fn stored_direction(&self) -> Result<Direction> {
        self.direction
            .parse()
            .map_err(|_| anyhow::anyhow!("config direction {:?} is not like \"lu2en\"", self.direction))
    }

    /// Checks that every declared input file exists (ingest-time rule).
    pub fn validate_inputs(&self) -> Result<()> {
        if self.inputs.is_empty() {
            bail!("config declares no inputs");
        }
        for input in &self.inputs {
            if !input.path().is_file() {
                bail!("input file {} does not exist", input.path().display());
            }
        }
        Ok(())
    }
}
