//! Top-N evaluation: relevance resolution, HR / NDCG / Precision and
//! latency percentiles.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{Catalog, CatalogError, EvalInstance, Resolution};
use crate::critic::CriticModel;
use crate::critique_loop::{synthetic_item, LoopTrace};
use crate::embedder::EmbeddingProvider;
use crate::llm::RankedList;


/// Rating at or above which an item counts as relevant.
pub const RELEVANCE_THRESHOLD: f64 = 4.0;

pub const DEFAULT_NS: [usize; 3] = [3, 5, 10];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no traces to aggregate")]
    NoTraces,
    #[error("oracle mode requires an oracle model")]
    MissingOracle,
    #[error("candidate-set mode requires candidate sets (user {0} has none)")]
    MissingCandidates(String),
    #[error("trace for {user}: {source}")]
    Restore { user: String, source: CatalogError },
    #[error("cutoffs must be positive")]
    InvalidCutoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceMode {
    RealOnly,
    Oracle,
    CandidateSet,
}

impl RelevanceMode {
    pub fn tag(self) -> &'static str {
        match self {
            RelevanceMode::RealOnly => "real_only",
            RelevanceMode::Oracle => "oracle",
            RelevanceMode::CandidateSet => "candidate_set",
        }
    }
}

impl std::str::FromStr for RelevanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "real_only" | "real" => Ok(RelevanceMode::RealOnly),
            "oracle" => Ok(RelevanceMode::Oracle),
            "candidate_set" | "candidate" => Ok(RelevanceMode::CandidateSet),
            other => Err(format!("unknown evaluation mode {other:?} (real_only, oracle, candidate_set)")),
        }
    }
}

/// Where a position's relevance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceSource {
    /// The user's held-out rating.
    Real,
    /// The oracle critic's estimate.
    Oracle,
    /// In the candidate set but not rated by the user.
    Candidate,
    /// No rating available: unknown title, or outside the candidate set.
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceVector {
    pub rels: Vec<u8>,
    pub sources: Vec<RelevanceSource>,
}

impl RelevanceVector {
    pub fn new(rels: Vec<u8>, sources: Vec<RelevanceSource>) -> Self {
        assert_eq!(rels.len(), sources.len(), "one source per position");
        Self { rels, sources }
    }

    /// All positions resolved from real ratings.
    pub fn real(rels: Vec<u8>) -> Self {
        let sources = vec![RelevanceSource::Real; rels.len()];
        Self { rels, sources }
    }

    pub fn len(&self) -> usize {
        self.rels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rels.is_empty()
    }
}

/// Resources for turning recommended titles into relevance labels.
#[derive(Clone, Copy)]
pub struct RelevanceContext<'a> {
    pub catalog: &'a Catalog,
    pub mode: RelevanceMode,
    pub oracle: Option<(&'a CriticModel, &'a dyn EmbeddingProvider)>,
    pub threshold: f64,
}

impl<'a> RelevanceContext<'a> {
    pub fn new(catalog: &'a Catalog, mode: RelevanceMode) -> Self {
        Self { catalog, mode, oracle: None, threshold: RELEVANCE_THRESHOLD }
    }

    pub fn with_oracle(mut self, oracle: &'a CriticModel, provider: &'a dyn EmbeddingProvider) -> Self {
        self.oracle = Some((oracle, provider));
        self
    }

    fn check(&self, instances: &[EvalInstance]) -> Result<(), MetricsError> {
        match self.mode {
            RelevanceMode::Oracle if self.oracle.is_none() => Err(MetricsError::MissingOracle),
            RelevanceMode::CandidateSet => match instances.iter().find(|i| i.candidate_set.is_none()) {
                Some(i) => Err(MetricsError::MissingCandidates(i.user_id.clone())),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

/// Relevance of one recommended title for one user. A real held-out rating
/// always wins; otherwise the mode decides.
pub fn resolve_relevance(ctx: &RelevanceContext, inst: &EvalInstance, raw_title: &str) -> (u8, RelevanceSource) {
    let rel = |r: f64| u8::from(r >= ctx.threshold);
    let item = match ctx.catalog.resolve_item(raw_title) {
        Resolution::Exact(item) | Resolution::Fuzzy { item, .. } => Some(item),
        Resolution::Unresolved => None,
    };
    if ctx.mode == RelevanceMode::CandidateSet {
        return match item {
            Some(it) if inst.in_candidate_set(&it.id) => match inst.held_out_rating(&it.id) {
                Some(r) => (rel(r), RelevanceSource::Real),
                None => (0, RelevanceSource::Candidate),
            },
            _ => (0, RelevanceSource::Unresolved),
        };
    }
    if let Some(r) = item.as_ref().and_then(|it| inst.held_out_rating(&it.id)) {
        return (rel(r), RelevanceSource::Real);
    }
    match (ctx.mode, ctx.oracle) {
        (RelevanceMode::Oracle, Some((oracle, provider))) => {
            let target = item.unwrap_or_else(|| std::sync::Arc::new(synthetic_item(raw_title)));
            match oracle.predict_rating(provider, &inst.history, &target) {
                Ok(s) => (rel(s.estimated_rating), RelevanceSource::Oracle),
                Err(e) => {
                    log::warn!("oracle could not score {raw_title:?} for {}: {e}", inst.user_id);
                    (0, RelevanceSource::Unresolved)
                }
            }
        }
        _ => (0, RelevanceSource::Unresolved),
    }
}

pub fn relevance_vector(ctx: &RelevanceContext, inst: &EvalInstance, list: &RankedList) -> RelevanceVector {
    let (rels, sources) = list.titles().map(|t| resolve_relevance(ctx, inst, t)).unzip();
    RelevanceVector { rels, sources }
}

fn gain(rel: u8) -> f64 {
    2f64.powi(i32::from(rel)) - 1.0
}

fn discount(pos: usize) -> f64 {
    ((pos + 2) as f64).log2()
}

/// Fraction of users with a relevant item among their first `n` positions
/// (fewer when a list is shorter).
pub fn hr_at_n(vectors: &[RelevanceVector], n: usize) -> f64 {
    if vectors.is_empty() {
        return 0.0;
    }
    let hits = vectors.iter().filter(|v| v.rels.iter().take(n).any(|&r| r > 0)).count();
    hits as f64 / vectors.len() as f64
}

/// DCG over the first `n` positions divided by the DCG of the first `n`
/// positions of the whole vector sorted by relevance; 0 when that is 0.
pub fn ndcg_at_n(v: &RelevanceVector, n: usize) -> f64 {
    let dcg: f64 = v.rels.iter().take(n).enumerate().map(|(i, &r)| gain(r) / discount(i)).sum();
    let mut ideal = v.rels.clone();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(n).enumerate().map(|(i, &r)| gain(r) / discount(i)).sum();
    if idcg == 0.0 {
        0.0
    } else {
        dcg / idcg
    }
}

/// Relevant share of the first `n` positions. In real-only mode unresolved
/// positions leave both numerator and denominator; `None` when nothing is left.
pub fn precision_at_n(v: &RelevanceVector, n: usize, mode: RelevanceMode) -> Option<f64> {
    let mut hits = 0usize;
    let mut denom = 0usize;
    for (&r, &s) in v.rels.iter().zip(&v.sources).take(n) {
        if mode == RelevanceMode::RealOnly && s == RelevanceSource::Unresolved {
            continue;
        }
        denom += 1;
        hits += usize::from(r > 0);
    }
    if mode != RelevanceMode::RealOnly {
        denom = n;
    }
    (denom > 0).then(|| hits as f64 / denom as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtN {
    pub n: usize,
    pub hr: f64,
    pub ndcg: f64,
    pub precision: f64,
    pub hr_users: usize,
    pub ndcg_users: usize,
    pub precision_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopMetrics {
    pub loop_index: usize,
    /// Users whose trace has a list for this loop.
    pub users: usize,
    pub at: Vec<MetricsAtN>,
    /// Share of evaluated positions (up to the largest N) without a rating.
    pub unresolved_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub loop_index: usize,
    pub calls: usize,
    pub p50_ms: f64,
    pub p90_ms: f64,
    pub p99_ms: f64,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: RelevanceMode,
    pub ns: Vec<usize>,
    pub users: usize,
    /// Users whose run failed before producing any list.
    pub failed_users: usize,
    /// Users left out before the run (e.g. too few ratings).
    pub skipped_users: usize,
    pub loops: Vec<LoopMetrics>,
    pub latency: Vec<LatencySummary>,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn metrics_at(vectors: &[RelevanceVector], n: usize, mode: RelevanceMode) -> MetricsAtN {
    let full: Vec<&RelevanceVector> = vectors.iter().filter(|v| v.len() >= n).collect();
    let ndcgs: Vec<f64> = full.iter().map(|v| ndcg_at_n(v, n)).collect();
    let precs: Vec<f64> = full.iter().filter_map(|v| precision_at_n(v, n, mode)).collect();
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    MetricsAtN {
        n,
        hr: hr_at_n(vectors, n),
        ndcg: mean(&ndcgs),
        precision: mean(&precs),
        hr_users: vectors.len(),
        ndcg_users: ndcgs.len(),
        precision_users: precs.len(),
    }
}

/// Metrics for loops 0..=max executed over all traces, plus call latencies.
pub fn aggregate(
    traces: &[LoopTrace],
    ctx: &RelevanceContext,
    ns: &[usize],
    skipped_users: usize,
) -> Result<MetricsReport, MetricsError> {
    if traces.is_empty() {
        return Err(MetricsError::NoTraces);
    }
    if ns.contains(&0) {
        return Err(MetricsError::InvalidCutoff);
    }
    let instances = traces
        .iter()
        .map(|t| {
            t.instance.restore(ctx.catalog).map_err(|source| MetricsError::Restore { user: t.user_id.clone(), source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    ctx.check(&instances)?;

    let max_n = ns.iter().copied().max().unwrap_or(0);
    let loops = traces.iter().map(|t| t.loops_requested).max().unwrap_or(0);
    let mut loop_rows = Vec::with_capacity(loops + 1);
    for l in 0..=loops {
        let mut vectors = Vec::new();
        let (mut unresolved, mut positions) = (0usize, 0usize);
        for (t, inst) in traces.iter().zip(&instances) {
            let Some(list) = t.list_after(l) else { continue };
            let v = relevance_vector(ctx, inst, list);
            for s in v.sources.iter().take(max_n) {
                positions += 1;
                unresolved += usize::from(*s == RelevanceSource::Unresolved);
            }
            vectors.push(v);
        }
        loop_rows.push(LoopMetrics {
            loop_index: l,
            users: vectors.len(),
            at: ns.iter().map(|&n| metrics_at(&vectors, n, ctx.mode)).collect(),
            unresolved_fraction: if positions == 0 { 0.0 } else { unresolved as f64 / positions as f64 },
        });
    }

    let mut by_loop: Vec<Vec<f64>> = Vec::new();
    for t in traces {
        for (i, c) in t.calls.iter().enumerate() {
            if by_loop.len() <= i {
                by_loop.resize(i + 1, Vec::new());
            }
            by_loop[i].push(c.latency_ms);
        }
    }
    let latency = by_loop
        .into_iter()
        .enumerate()
        .map(|(loop_index, mut xs)| {
            xs.sort_by(f64::total_cmp);
            LatencySummary {
                loop_index,
                calls: xs.len(),
                p50_ms: percentile(&xs, 50.0),
                p90_ms: percentile(&xs, 90.0),
                p99_ms: percentile(&xs, 99.0),
                mean_ms: xs.iter().sum::<f64>() / xs.len() as f64,
            }
        })
        .collect();

    Ok(MetricsReport {
        mode: ctx.mode,
        ns: ns.to_vec(),
        users: traces.len(),
        failed_users: traces.iter().filter(|t| t.lists.is_empty()).count(),
        skipped_users,
        loops: loop_rows,
        latency,
    })
}

impl MetricsReport {
    pub fn is_empty(&self) -> bool {
        self.users == self.failed_users
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,loop,n,hr,ndcg,precision,hr_users,ndcg_users,precision_users\n");
        for l in &self.loops {
            for m in &l.at {
                let _ = writeln!(
                    out,
                    "{},{},{},{:.6},{:.6},{:.6},{},{},{}",
                    self.mode.tag(),
                    l.loop_index,
                    m.n,
                    m.hr,
                    m.ndcg,
                    m.precision,
                    m.hr_users,
                    m.ndcg_users,
                    m.precision_users
                );
            }
        }
        out
    }

    /// Aligned text tables: one metric row per (loop, N), then latencies.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "mode: {}   users: {}   failed: {}   skipped: {}",
            self.mode.tag(),
            self.users,
            self.failed_users,
            self.skipped_users
        );
        if self.is_empty() {
            out.push_str("no successful users; nothing to report\n");
            return out;
        }
        let _ = writeln!(out, "{:>4} {:>4} {:>8} {:>8} {:>10} {:>6} {:>11}", "loop", "N", "HR", "NDCG", "Precision", "users", "unresolved");
        for l in &self.loops {
            for m in &l.at {
                // lists shorter than N leave NDCG and Precision without users
                let cell = |v: f64, users: usize| if users == 0 { "-".to_string() } else { format!("{v:.4}") };
                let _ = writeln!(
                    out,
                    "{:>4} {:>4} {:>8.4} {:>8} {:>10} {:>6} {:>11.4}",
                    l.loop_index,
                    m.n,
                    m.hr,
                    cell(m.ndcg, m.ndcg_users),
                    cell(m.precision, m.precision_users),
                    l.users,
                    l.unresolved_fraction
                );
            }
        }
        let _ = writeln!(out, "\n{:>4} {:>6} {:>10} {:>10} {:>10} {:>10}", "loop", "calls", "p50 ms", "p90 ms", "p99 ms", "mean ms");
        for s in &self.latency {
            let _ = writeln!(
                out,
                "{:>4} {:>6} {:>10.1} {:>10.1} {:>10.1} {:>10.1}",
                s.loop_index, s.calls, s.p50_ms, s.p90_ms, s.p99_ms, s.mean_ms
            );
        }
        out
    }

    /// Metrics for one loop and cutoff.
    pub fn get(&self, loop_index: usize, n: usize) -> Option<&MetricsAtN> {
        self.loops.get(loop_index)?.at.iter().find(|m| m.n == n)
    }
}

/// Side-by-side comparison of several reports on the shared (loop, N) rows.
pub fn compare_table(named: &[(String, MetricsReport)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:>4} {:>4}", "loop", "N");
    for (name, _) in named {
        let _ = write!(out, " | {:^26}", name);
    }
    out.push('\n');
    let _ = write!(out, "{:>4} {:>4}", "", "");
    for _ in named {
        let _ = write!(out, " | {:>8} {:>8} {:>8}", "HR", "NDCG", "P");
    }
    out.push('\n');
    let loops = named.iter().map(|(_, r)| r.loops.len()).max().unwrap_or(0);
    let ns: Vec<usize> = named.first().map(|(_, r)| r.ns.clone()).unwrap_or_default();
    for l in 0..loops {
        for &n in &ns {
            let _ = write!(out, "{l:>4} {n:>4}");
            for (_, r) in named {
                match r.get(l, n) {
                    Some(m) => {
                        let _ = write!(out, " | {:>8.4} {:>8.4} {:>8.4}", m.hr, m.ndcg, m.precision);
                    }
                    None => {
                        let _ = write!(out, " | {:>8} {:>8} {:>8}", "-", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
    }
    out
}
