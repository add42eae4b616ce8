mod cli;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use recritic::catalog::write_dataset;
use recritic::experiment::{
    self, dataset_stats, load_run, write_report, ExperimentConfig, ExperimentError, CONFIG_FILE, TRACES_FILE,
};
use recritic::metrics::compare_table;
use recritic::synthetic::{generate, SyntheticConfig};

use cli::{Cli, Command, Overrides};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

fn resolve(config: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            let usage = e.chain().any(|c| c.downcast_ref::<ExperimentError>().is_some_and(ExperimentError::is_usage));
            ExitCode::from(if usage { EXIT_USAGE } else { EXIT_FAILURE })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::IngestCheck { json } => {
            let cfg = resolve(config, &cli.overrides)?;
            cfg.validate()?;
            let (data, summary) = experiment::load(&cfg)?;
            let stats = dataset_stats(&data);
            if json {
                let v = serde_json::json!({ "load": summary, "stats": stats });
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                println!("dataset {} ({})", stats.name, cfg.dataset.path.display());
                println!(
                    "records: {} read, {} kept, {} malformed, {} off-scale, {} missing title, {} duplicate",
                    summary.total,
                    summary.kept,
                    summary.malformed,
                    summary.rejected_off_scale,
                    summary.rejected_missing_title,
                    summary.rejected_duplicate
                );
                println!(
                    "users: {}  items: {}  interactions: {}  per user: min {} / mean {:.1} / max {}",
                    stats.users, stats.items, stats.interactions, stats.min_per_user, stats.mean_per_user, stats.max_per_user
                );
                for (rating, count) in &stats.ratings {
                    println!("  rating {rating:>4}: {count}");
                }
            }
        }
        Command::TrainCritic { users } => {
            let cfg = resolve(config, &cli.overrides)?;
            let models = experiment::train_critic(&cfg, users.as_deref())?;
            for m in &models {
                println!(
                    "{}: {} users, {} epochs (best {}), validation accuracy {:.4}, log {}",
                    m.model_path.display(),
                    m.users,
                    m.log.epochs.len(),
                    m.log.best_epoch,
                    m.validation.accuracy,
                    m.log_path.display()
                );
            }
        }
        Command::BuildOracle => {
            let cfg = resolve(config, &cli.overrides)?;
            let m = experiment::build_oracle(&cfg)?;
            println!(
                "{}: {} users, validation accuracy {:.4}, log {}",
                m.model_path.display(),
                m.users,
                m.validation.accuracy,
                m.log_path.display()
            );
        }
        Command::RunExperiment => {
            let cfg = resolve(config, &cli.overrides)?;
            let outcome = experiment::run_experiment(&cfg)?;
            print!("{}", outcome.report.to_table());
            println!("artifacts in {}", cfg.out.display());
        }
        Command::Replay { run, write } => {
            let (dir, traces) = if run.is_dir() { (run.clone(), run.join(TRACES_FILE)) } else { (run.parent().map(Path::to_path_buf).unwrap_or_default(), run.clone()) };
            // without --config, reuse the configuration the run was made with
            let base = match config {
                Some(p) => p.to_path_buf(),
                None => dir.join(CONFIG_FILE),
            };
            let cfg = resolve(Some(&base), &cli.overrides)?;
            let report = experiment::replay(&cfg, &traces)?;
            print!("{}", report.to_table());
            if let Some(out) = write {
                write_report(&out, &report)?;
                println!("report written to {}", out.display());
            }
        }
        Command::Report { runs } => {
            let mut named = Vec::new();
            for dir in &runs {
                let (manifest, report) = load_run(dir)?;
                let report = report.with_context(|| format!("{} has no stored report", dir.display()))?;
                named.push((label(dir), manifest, report));
            }
            if let [(_, manifest, report)] = named.as_slice() {
                println!("status: {:?}   config: {}", manifest.status, &manifest.config_digest[..12.min(manifest.config_digest.len())]);
                print!("{}", report.to_table());
            } else {
                let pairs: Vec<_> = named.iter().map(|(l, _, r)| (l.clone(), r.clone())).collect();
                for (l, _, r) in &named {
                    if r.is_empty() {
                        println!("{l}: no successful users; nothing to report");
                    }
                }
                print!("{}", compare_table(&pairs));
            }
        }
        Command::SynthData { path, clusters, users_per_cluster, items_per_user, label_noise, seed } => {
            let sc = SyntheticConfig { clusters, users_per_cluster, items_per_user, label_noise, seed, ..SyntheticConfig::default() };
            let data = generate(&sc);
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            write_dataset(&data, &path)?;
            println!("{}: {} users, {} items", path.display(), data.users.len(), data.catalog.len());
        }
    }
    Ok(())
}

fn label(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| PathBuf::from(dir).display().to_string())
}

/// Error chain joined with ": ", skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}
