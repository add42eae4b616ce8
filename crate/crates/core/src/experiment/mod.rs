//! Config-driven pipeline: data preparation, critic and oracle training,
//! experiment runs, replay and reports. All artifacts live in one output
//! directory described by a manifest.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    BackendConfig, CriticSection, DatasetConfig, EmbedderConfig, ExperimentConfig, OracleSection,
};

use crate::catalog::{
    build_candidate_set, load_dataset, sample_eval_instance, sample_users, split_users, CatalogError, Dataset,
    EvalInstance, LoadOptions, LoadSummary,
};
use crate::critic::{
    build_samples, evaluate_critic, load_model, save_model, train, train_oracle, CriticError, CriticEvaluation,
    CriticModel, LoadCheck, TrainLog, MODEL_FORMAT_VERSION,
};
use crate::critique_loop::{run_loop, LoopConfig, LoopContext, LoopError, LoopRun, LoopTrace};
use crate::embedder::{EmbedError, EmbeddingProvider};
use crate::llm::PromptBuilder;
use crate::metrics::{aggregate, MetricsError, MetricsReport, RelevanceContext, RelevanceMode};
use crate::util::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const TRANSCRIPTS_FILE: &str = "transcripts.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";
pub const CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Critic(#[from] CriticError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error("missing artifact {0}; run the command that produces it first")]
    MissingArtifact(PathBuf),
    #[error("{path}, line {line}: {message}")]
    TraceFormat { path: String, line: usize, message: String },
    #[error("backend failed for {failed} user(s); aborted with {completed} trace(s) kept: {first}")]
    Backend { failed: usize, completed: usize, first: String },
    #[error("no users available for {0}")]
    NoUsers(&'static str),
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io { path: path.display().to_string(), source }
    }

    /// Errors caused by bad input (config, paths, data files) rather than by
    /// the experiment itself.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            ExperimentError::Config(_)
                | ExperimentError::Io { .. }
                | ExperimentError::Catalog(_)
                | ExperimentError::MissingArtifact(_)
                | ExperimentError::TraceFormat { .. }
        )
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| ExperimentError::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| ExperimentError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row).expect("rows serialize");
        w.write_all(b"\n").map_err(|e| ExperimentError::io(path, e))?;
    }
    w.flush().map_err(|e| ExperimentError::io(path, e))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Summary statistics of a loaded dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub min_per_user: usize,
    pub max_per_user: usize,
    pub mean_per_user: f64,
    /// (rating, count) for every scale level.
    pub ratings: Vec<(f64, usize)>,
}

pub fn dataset_stats(d: &Dataset) -> DatasetStats {
    let per_user: Vec<usize> = d.users.iter().map(|u| u.len()).collect();
    let interactions = per_user.iter().sum();
    let mut counts = vec![0usize; d.scale.levels()];
    for u in &d.users {
        for it in &u.interactions {
            if let Some(l) = d.scale.level_index(it.rating) {
                counts[l] += 1;
            }
        }
    }
    DatasetStats {
        name: d.name.clone(),
        users: d.users.len(),
        items: d.catalog.len(),
        interactions,
        min_per_user: per_user.iter().copied().min().unwrap_or(0),
        max_per_user: per_user.iter().copied().max().unwrap_or(0),
        mean_per_user: if per_user.is_empty() { 0.0 } else { interactions as f64 / per_user.len() as f64 },
        ratings: counts.into_iter().enumerate().map(|(l, c)| (d.scale.level_to_rating(l), c)).collect(),
    }
}

/// Dataset as loaded, plus the sampled user split.
pub struct Prepared {
    pub full: Dataset,
    pub summary: LoadSummary,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn load(cfg: &ExperimentConfig) -> Result<(Dataset, LoadSummary)> {
    if !cfg.dataset.path.exists() {
        return Err(ExperimentError::Config(format!("dataset {} does not exist", cfg.dataset.path.display())));
    }
    let opts = LoadOptions { max_malformed_fraction: cfg.dataset.max_malformed_fraction };
    Ok(load_dataset(&cfg.dataset.path, cfg.dataset.schema, &opts)?)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (full, summary) = load(cfg)?;
    let sampled = sample_users(&full, cfg.users, cfg.seed);
    let (train, val, test) = split_users(&sampled, cfg.split, cfg.seed)?;
    Ok(Prepared { full, summary, train, val, test })
}

/// A trained model and where it was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub users: usize,
    pub model_path: PathBuf,
    pub log_path: PathBuf,
    pub log: TrainLog,
    pub validation: CriticEvaluation,
    pub skipped_users: usize,
}

fn log_path(model: &Path) -> PathBuf {
    model.with_extension("log.json")
}

fn fit(
    cfg: &ExperimentConfig,
    data: &Dataset,
    val: &Dataset,
    provider: &dyn EmbeddingProvider,
    oracle: bool,
    path: PathBuf,
) -> Result<TrainedModel> {
    let (tc, targets) = if oracle {
        (&cfg.oracle.train, cfg.oracle.targets_per_user)
    } else {
        (&cfg.critic.train, cfg.critic.targets_per_user)
    };
    let (trainset, skipped) = build_samples(data, cfg.history_size, targets, cfg.seed);
    let (valset, _) = build_samples(val, cfg.history_size, targets, cfg.seed);
    if trainset.is_empty() {
        return Err(ExperimentError::NoUsers("training (every user has ≤ history_size ratings)"));
    }
    let (model, log) = if oracle {
        train_oracle(data.scale, &trainset, &valset, tc, provider)?
    } else {
        train(data.scale, &trainset, &valset, tc, provider)?
    };
    let validation = evaluate_critic(&model, provider, &valset)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ExperimentError::io(dir, e))?;
    }
    save_model(&model, &path)?;
    let lp = log_path(&path);
    let out = TrainedModel { users: data.users.len(), model_path: path, log_path: lp.clone(), log, validation, skipped_users: skipped };
    write_file(&lp, &serde_json::to_string_pretty(&out).expect("log serializes"))?;
    Ok(out)
}

/// Trains the critic on the training split. With `sweep`, trains one model
/// per training-user count (nested subsets), all validated on the same
/// validation split.
pub fn train_critic(cfg: &ExperimentConfig, sweep: Option<&[usize]>) -> Result<Vec<TrainedModel>> {
    let prep = prepare(cfg)?;
    let provider = cfg.embedder.build()?;
    match sweep {
        None => Ok(vec![fit(cfg, &prep.train, &prep.val, provider.as_ref(), false, cfg.critic_path())?]),
        Some(sizes) => sizes
            .iter()
            .map(|&n| {
                if n > prep.train.users.len() {
                    log::warn!("sweep size {n} exceeds {} training users", prep.train.users.len());
                }
                let subset = sample_users(&prep.train, n, derive_seed(cfg.seed, "sweep"));
                fit(cfg, &subset, &prep.val, provider.as_ref(), false, cfg.out.join(format!("critic-u{n}.model")))
            })
            .collect(),
    }
}

/// Trains the oracle on users drawn from the whole dataset.
pub fn build_oracle(cfg: &ExperimentConfig) -> Result<TrainedModel> {
    let prep = prepare(cfg)?;
    let provider = cfg.embedder.build()?;
    let n = cfg.oracle.users.unwrap_or(prep.full.users.len());
    let users = sample_users(&prep.full, n, derive_seed(cfg.seed, "oracle"));
    fit(cfg, &users, &prep.val, provider.as_ref(), true, cfg.oracle_path())
}

fn load_checked(path: &Path, provider: &dyn EmbeddingProvider) -> Result<CriticModel> {
    if !path.exists() {
        return Err(ExperimentError::MissingArtifact(path.to_path_buf()));
    }
    let check = LoadCheck { expected_fingerprint: Some(provider.fingerprint()), allow_fingerprint_mismatch: false };
    Ok(load_model(path, &check)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Aborted,
}

/// Index of a run directory. Artifact paths are relative to the directory
/// unless they point outside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub status: RunStatus,
    pub users: usize,
    pub skipped_users: usize,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub versions: BTreeMap<String, String>,
    pub started_at: u64,
    pub finished_at: u64,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(ExperimentError::MissingArtifact(path));
        }
        let text = fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }
}

pub struct RunOutcome {
    pub report: MetricsReport,
    pub manifest: RunManifest,
    pub traces: Vec<LoopTrace>,
}

fn relevance_ctx<'a>(
    mode: RelevanceMode,
    full: &'a Dataset,
    oracle: Option<&'a CriticModel>,
    provider: &'a dyn EmbeddingProvider,
) -> RelevanceContext<'a> {
    let ctx = RelevanceContext::new(&full.catalog, mode);
    match oracle {
        Some(o) => ctx.with_oracle(o, provider),
        None => ctx,
    }
}

/// Evaluation instances for the test split; users with too few ratings are skipped.
pub fn eval_instances(cfg: &ExperimentConfig, prep: &Prepared) -> (Vec<EvalInstance>, usize) {
    let mut skipped = 0;
    let mut out = Vec::new();
    for u in &prep.test.users {
        match sample_eval_instance(u, cfg.history_size, cfg.seed) {
            Ok(mut inst) => {
                if cfg.mode == RelevanceMode::CandidateSet {
                    inst.candidate_set =
                        Some(build_candidate_set(&inst, &prep.full.catalog, cfg.candidate_set_size, cfg.seed));
                }
                out.push(inst);
            }
            Err(e) => {
                log::debug!("{e}");
                skipped += 1;
            }
        }
    }
    (out, skipped)
}

/// Runs loops for every instance with at most `max_in_flight` users at a
/// time. After a backend failure no further users are started.
fn execute(ctx: &LoopContext, instances: &[EvalInstance], lc: &LoopConfig) -> Vec<Option<std::result::Result<LoopRun, LoopError>>> {
    let abort = AtomicBool::new(false);
    let one = |inst: &EvalInstance| {
        if abort.load(Ordering::SeqCst) {
            return None;
        }
        let r = run_loop(ctx, inst, lc);
        if let Ok(run) = &r {
            if run.trace.error.as_ref().is_some_and(|e| e.backend) {
                abort.store(true, Ordering::SeqCst);
            }
        }
        Some(r)
    };
    match rayon::ThreadPoolBuilder::new().num_threads(ctx.backend.max_in_flight().max(1)).build() {
        Ok(pool) => pool.install(|| instances.par_iter().map(one).collect()),
        Err(_) => instances.iter().map(one).collect(),
    }
}

/// Runs critique loops over the test split and writes traces, transcripts,
/// reports, the resolved config and the manifest to `cfg.out`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let started_at = now();
    let prep = prepare(cfg)?;
    let provider = cfg.embedder.build()?;
    let critic = load_checked(&cfg.critic_path(), provider.as_ref())?;
    let oracle = match cfg.mode {
        RelevanceMode::Oracle => Some(load_checked(&cfg.oracle_path(), provider.as_ref())?),
        _ => None,
    };
    let (instances, skipped) = eval_instances(cfg, &prep);
    if instances.is_empty() {
        return Err(ExperimentError::NoUsers("evaluation (test split is empty or every user has too few ratings)"));
    }
    let backend = cfg.backend.build(&prep.full);
    let prompts = PromptBuilder::new(cfg.templates(), cfg.llm.clone());
    let ctx = LoopContext {
        critic: &critic,
        provider: provider.as_ref(),
        catalog: &prep.full.catalog,
        backend: backend.as_ref(),
        prompts: &prompts,
    };
    let lc = LoopConfig { loops: cfg.loops, n: cfg.list_size, candidate_mode: cfg.mode == RelevanceMode::CandidateSet };
    let results = execute(&ctx, &instances, &lc);

    let mut traces = Vec::new();
    let mut transcripts = Vec::new();
    let mut first_failure = None;
    let mut failed = 0;
    for r in results.into_iter().flatten() {
        let run = r?;
        if let Some(e) = run.trace.error.as_ref().filter(|e| e.backend) {
            failed += 1;
            first_failure.get_or_insert_with(|| format!("{}: {}", run.trace.user_id, e.message));
        }
        transcripts.extend(run.transcript);
        traces.push(run.trace);
    }

    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| ExperimentError::io(out, e))?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    write_jsonl(&out.join(TRACES_FILE), &traces)?;
    write_jsonl(&out.join(TRANSCRIPTS_FILE), &transcripts)?;

    let mut artifacts = BTreeMap::new();
    for (k, v) in [("config", CONFIG_FILE), ("traces", TRACES_FILE), ("transcripts", TRANSCRIPTS_FILE)] {
        artifacts.insert(k.to_string(), PathBuf::from(v));
    }
    let rel = |p: PathBuf| p.strip_prefix(out).map(Path::to_path_buf).unwrap_or(p);
    artifacts.insert("critic".into(), rel(cfg.critic_path()));
    if oracle.is_some() {
        artifacts.insert("oracle".into(), rel(cfg.oracle_path()));
    }
    let mut versions = BTreeMap::new();
    versions.insert("recritic".to_string(), env!("CARGO_PKG_VERSION").to_string());
    versions.insert("model_format".to_string(), MODEL_FORMAT_VERSION.to_string());
    versions.insert("embedder".to_string(), provider.fingerprint());
    let mut manifest = RunManifest {
        config_digest: cfg.digest(),
        status: RunStatus::Aborted,
        users: instances.len(),
        skipped_users: skipped,
        artifacts,
        versions,
        started_at,
        finished_at: 0,
    };

    // partial traces still get a report so an aborted run can be inspected
    let rctx = relevance_ctx(cfg.mode, &prep.full, oracle.as_ref(), provider.as_ref());
    let report = aggregate(&traces, &rctx, &cfg.ns, skipped)?;
    write_report(out, &report)?;
    for (k, v) in [("report_json", REPORT_JSON), ("report_text", REPORT_TEXT), ("report_csv", REPORT_CSV)] {
        manifest.artifacts.insert(k.to_string(), PathBuf::from(v));
    }
    manifest.finished_at = now();
    if let Some(first) = first_failure {
        write_file(&out.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        return Err(ExperimentError::Backend { failed, completed: traces.len() - failed, first });
    }
    manifest.status = RunStatus::Completed;
    write_file(&out.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(RunOutcome { report, manifest, traces })
}

pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_file(&dir.join(REPORT_JSON), &report.to_json())?;
    write_file(&dir.join(REPORT_TEXT), &report.to_table())?;
    write_file(&dir.join(REPORT_CSV), &report.to_csv())
}

/// Reads a JSONL trace file; a bad line is reported with its number.
pub fn read_traces(path: &Path) -> Result<Vec<LoopTrace>> {
    let file = fs::File::open(path).map_err(|e| ExperimentError::io(path, e))?;
    let mut traces = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ExperimentError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t = serde_json::from_str(&line).map_err(|e| ExperimentError::TraceFormat {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        traces.push(t);
    }
    Ok(traces)
}

/// Recomputes metrics from stored traces without calling any backend.
pub fn replay(cfg: &ExperimentConfig, traces_path: &Path) -> Result<MetricsReport> {
    let traces = read_traces(traces_path)?;
    let (full, _) = load(cfg)?;
    let provider = cfg.embedder.build()?;
    let oracle = match cfg.mode {
        RelevanceMode::Oracle => Some(load_checked(&cfg.oracle_path(), provider.as_ref())?),
        _ => None,
    };
    let skipped = traces_path
        .parent()
        .and_then(|d| RunManifest::load(d).ok())
        .map_or(0, |m| m.skipped_users);
    let rctx = relevance_ctx(cfg.mode, &full, oracle.as_ref(), provider.as_ref());
    Ok(aggregate(&traces, &rctx, &cfg.ns, skipped)?)
}

/// Manifest and stored report of a finished run.
pub fn load_run(dir: &Path) -> Result<(RunManifest, Option<MetricsReport>)> {
    let manifest = RunManifest::load(dir)?;
    let report = match manifest.artifacts.get("report_json") {
        Some(p) => {
            let path = dir.join(p);
            let text = fs::read_to_string(&path).map_err(|e| ExperimentError::io(&path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?)
        }
        None => None,
    };
    Ok((manifest, report))
}
