use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use recritic::catalog::Schema;
use recritic::experiment::{BackendConfig, ExperimentConfig};
use recritic::llm::RemoteLlmConfig;
use recritic::metrics::RelevanceMode;

#[derive(Debug, Parser)]
#[command(name = "recritic", version, about = "Critic-guided LLM recommendation experiments")]
pub struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load the dataset and print record and rating statistics.
    IngestCheck {
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Train the rating critic on the training split.
    TrainCritic {
        /// Comma-separated training-user counts; one model per count.
        #[arg(long, value_delimiter = ',')]
        users: Option<Vec<usize>>,
    },
    /// Train the oracle used to judge items without a real rating.
    BuildOracle,
    /// Run critique loops over the test users and write traces and reports.
    RunExperiment,
    /// Recompute metrics from stored traces without calling the backend.
    Replay {
        /// Run directory or trace file.
        run: PathBuf,
        /// Also write the recomputed report files into this directory.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Print the report of one run, or compare two runs side by side.
    Report {
        #[arg(required = true, num_args = 1..=2)]
        runs: Vec<PathBuf>,
    },
    /// Write a synthetic dataset with planted user preferences.
    SynthData {
        /// Output JSONL path; a `.meta.json` sidecar is written next to it.
        path: PathBuf,
        #[arg(long, default_value_t = 2)]
        clusters: usize,
        #[arg(long, default_value_t = 200)]
        users_per_cluster: usize,
        #[arg(long, default_value_t = 30)]
        items_per_user: usize,
        #[arg(long, default_value_t = 0.1)]
        label_noise: f64,
        #[arg(long = "synth-seed", default_value_t = 11)]
        seed: u64,
    },
}

/// Flags that override config values.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub schema: Option<Schema>,
    /// Output directory for models, traces and reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Users sampled from the dataset before splitting.
    #[arg(long, global = true)]
    pub sample_users: Option<usize>,
    #[arg(long, global = true)]
    pub history_size: Option<usize>,
    #[arg(long, global = true)]
    pub list_size: Option<usize>,
    #[arg(long, global = true)]
    pub loops: Option<usize>,
    /// oracle, real_only or candidate_set.
    #[arg(long, global = true)]
    pub mode: Option<RelevanceMode>,
    /// Comma-separated metric cutoffs.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
    /// Critic hidden width.
    #[arg(long, global = true)]
    pub hidden: Option<usize>,
    /// Critic training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Use a remote chat-completions endpoint instead of the mock.
    #[arg(long, global = true)]
    pub llm_url: Option<String>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = &self.dataset {
            cfg.dataset.path = v.clone();
        }
        if let Some(v) = self.schema {
            cfg.dataset.schema = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.sample_users {
            cfg.users = v;
        }
        if let Some(v) = self.history_size {
            cfg.history_size = v;
        }
        if let Some(v) = self.list_size {
            cfg.list_size = v;
        }
        if let Some(v) = self.loops {
            cfg.loops = v;
        }
        if let Some(v) = self.mode {
            cfg.mode = v;
        }
        if let Some(v) = &self.ns {
            cfg.ns = v.clone();
        }
        if let Some(v) = self.hidden {
            cfg.critic.train.hidden = v;
        }
        if let Some(v) = self.epochs {
            cfg.critic.train.epochs = v;
        }
        if let Some(url) = &self.llm_url {
            cfg.backend = match &cfg.backend {
                BackendConfig::Remote(r) => BackendConfig::Remote(RemoteLlmConfig { url: url.clone(), ..r.clone() }),
                BackendConfig::Mock(_) => BackendConfig::Remote(RemoteLlmConfig::new(url.clone())),
            };
        }
    }
}
