use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::catalog::{Dataset, Schema, SplitRatios};
use crate::critic::TrainConfig;
use crate::embedder::{EmbeddingProvider, HashedProvider, RemoteEmbeddingConfig, RemoteProvider, DEFAULT_DIM};
use crate::llm::{LlmBackend, LlmSettings, MockBackend, MockConfig, PromptTemplates, RemoteBackend, RemoteLlmConfig};
use crate::metrics::{RelevanceMode, DEFAULT_NS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub schema: Schema,
    pub max_malformed_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { path: PathBuf::new(), schema: Schema::Movies, max_malformed_fraction: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct CriticSection {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Held-out items used as training targets per user; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets_per_user: Option<usize>,
    /// Model file; `<out>/critic.model` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct OracleSection {
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Users the oracle trains on, drawn from the whole dataset; all when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub users: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub targets_per_user: Option<usize>,
    /// Model file; `<out>/oracle.model` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbedderConfig {
    Hashed { dim: usize },
    Remote(RemoteEmbeddingConfig),
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hashed { dim: DEFAULT_DIM }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider>, ExperimentError> {
        Ok(match self {
            EmbedderConfig::Hashed { dim } => {
                if *dim == 0 {
                    return Err(ExperimentError::Config("embedder dim must be positive".into()));
                }
                Box::new(HashedProvider::new(*dim))
            }
            EmbedderConfig::Remote(c) => Box::new(RemoteProvider::new(c.clone())?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Mock(MockConfig),
    Remote(RemoteLlmConfig),
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Mock(MockConfig::default())
    }
}

impl BackendConfig {
    /// The mock answers from `world`, standing in for the model's knowledge.
    pub fn build(&self, world: &Dataset) -> Box<dyn LlmBackend> {
        match self {
            BackendConfig::Mock(c) => Box::new(MockBackend::from_dataset(world, c.clone())),
            BackendConfig::Remote(c) => Box::new(RemoteBackend::new(c.clone())),
        }
    }
}

/// One experiment, as read from a TOML file and overridden by flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Users sampled from the dataset before splitting.
    pub users: usize,
    /// Interactions shown as history (k).
    pub history_size: usize,
    /// Items requested per recommendation list.
    pub list_size: usize,
    pub loops: usize,
    pub ns: Vec<usize>,
    pub mode: RelevanceMode,
    pub candidate_set_size: usize,
    /// Directory all artifacts are written to.
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub split: SplitRatios,
    pub critic: CriticSection,
    pub oracle: OracleSection,
    pub embedder: EmbedderConfig,
    pub backend: BackendConfig,
    pub llm: LlmSettings,
    /// Prompt templates; chosen from the dataset schema when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PromptTemplates>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            users: 10_000,
            history_size: 20,
            list_size: 10,
            loops: 1,
            ns: DEFAULT_NS.to_vec(),
            mode: RelevanceMode::Oracle,
            candidate_set_size: 30,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            split: SplitRatios::default(),
            critic: CriticSection::default(),
            oracle: OracleSection::default(),
            embedder: EmbedderConfig::default(),
            backend: BackendConfig::default(),
            llm: LlmSettings::default(),
            prompts: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML.
    pub fn digest(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.into()));
        if self.dataset.path.as_os_str().is_empty() {
            return bad("dataset.path is required");
        }
        if self.users == 0 || self.history_size == 0 || self.list_size == 0 {
            return bad("users, history_size and list_size must be ≥ 1");
        }
        if self.ns.is_empty() || self.ns.contains(&0) {
            return bad("ns must list positive cutoffs");
        }
        if self.mode == RelevanceMode::CandidateSet && self.candidate_set_size < self.list_size {
            return bad("candidate_set_size must be at least list_size");
        }
        if !(0.0..=1.0).contains(&self.dataset.max_malformed_fraction) {
            return bad("dataset.max_malformed_fraction must be in [0, 1]");
        }
        Ok(())
    }

    pub fn critic_path(&self) -> PathBuf {
        self.critic.model.clone().unwrap_or_else(|| self.out.join("critic.model"))
    }

    pub fn oracle_path(&self) -> PathBuf {
        self.oracle.model.clone().unwrap_or_else(|| self.out.join("oracle.model"))
    }

    pub fn templates(&self) -> PromptTemplates {
        self.prompts.clone().unwrap_or_else(|| match self.dataset.schema {
            Schema::Movies => PromptTemplates::movies(),
            Schema::Books => PromptTemplates::books(),
            Schema::Generic => PromptTemplates::default(),
        })
    }
}
