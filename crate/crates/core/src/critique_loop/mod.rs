//! Recommend, score with the critic, feed the scores back, recommend again.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{normalize_title, Catalog, EvalInstance, Item, ItemId, Resolution, StoredInstance, UserHistory};
use crate::critic::{CriticModel, CriticScore};
use crate::embedder::EmbeddingProvider;
use crate::llm::{parse_ranked_list, CallOutcome, CallRecord, ChatRequest, LlmBackend, ListSource, PromptBuilder, RankedList};

#[cfg(test)]
mod tests;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("user {0} has an empty history")]
    EmptyHistory(String),
    #[error("at least one recommendation must be requested")]
    ZeroCount,
    #[error("candidate-set mode requires a candidate set for user {0}")]
    MissingCandidates(String),
}

/// Critic verdict on one recommended entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub rank: usize,
    pub raw_title: String,
    /// Catalog item the title resolved to, if any.
    pub item_id: Option<ItemId>,
    /// Scored from a transient item built from the raw title.
    pub synthetic: bool,
    /// Absent when scoring failed.
    pub score: Option<CriticScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackReport {
    pub loop_index: usize,
    pub entries: Vec<FeedbackEntry>,
}

impl FeedbackReport {
    /// Mean estimated rating over scored entries.
    pub fn mean_estimate(&self) -> Option<f64> {
        let r: Vec<f64> = self.entries.iter().filter_map(|e| e.score.as_ref().map(|s| s.estimated_rating)).collect();
        (!r.is_empty()).then(|| r.iter().sum::<f64>() / r.len() as f64)
    }
}

/// Item standing in for a title the catalog does not know.
pub fn synthetic_item(raw_title: &str) -> Item {
    let id = format!("synthetic:{}", normalize_title(raw_title).canonical);
    Item::from_title(id, raw_title)
}

/// Scores every entry; unresolved titles are scored through a synthetic item.
pub fn score_recommendations(
    critic: &CriticModel,
    provider: &dyn EmbeddingProvider,
    history: &UserHistory,
    recs: &RankedList,
    catalog: &Catalog,
    loop_index: usize,
) -> FeedbackReport {
    let resolved: Vec<(Option<ItemId>, Arc<Item>)> = recs
        .entries
        .iter()
        .map(|e| match catalog.resolve_item(&e.raw_title) {
            Resolution::Exact(item) | Resolution::Fuzzy { item, .. } => (Some(item.id.clone()), item),
            Resolution::Unresolved => (None, Arc::new(synthetic_item(&e.raw_title))),
        })
        .collect();
    let items: Vec<&Item> = resolved.iter().map(|(_, it)| it.as_ref()).collect();
    let scores = match critic.predict_many(provider, history, &items) {
        Ok(s) => s.into_iter().map(|r| r.map_err(|e| log::warn!("scoring failed: {e}")).ok()).collect(),
        Err(e) => {
            log::warn!("history encoding failed for {}: {e}", history.user_id);
            vec![None; items.len()]
        }
    };
    let entries = recs
        .entries
        .iter()
        .zip(resolved)
        .zip(scores)
        .map(|((e, (item_id, _)), score)| FeedbackEntry {
            rank: e.rank,
            raw_title: e.raw_title.clone(),
            synthetic: item_id.is_none(),
            item_id,
            score,
        })
        .collect();
    FeedbackReport { loop_index, entries }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Refinement rounds; 0 is the plain recommender without critic.
    pub loops: usize,
    /// Items requested per list.
    pub n: usize,
    /// Restrict recommendations to the instance's candidate set.
    pub candidate_mode: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { loops: 1, n: 10, candidate_mode: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceError {
    pub loop_index: usize,
    pub message: String,
    /// The backend itself failed, as opposed to an unusable answer.
    pub backend: bool,
}

/// Everything one user's run produced. `lists[i]` came from call `calls[i]`;
/// `feedback[i]` scored `lists[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopTrace {
    pub user_id: String,
    pub instance: StoredInstance,
    pub loops_requested: usize,
    pub loops_executed: usize,
    pub lists: Vec<RankedList>,
    pub feedback: Vec<FeedbackReport>,
    pub calls: Vec<CallRecord>,
    pub final_list: RankedList,
    /// Loop indices whose answer had fewer than `n` parseable items.
    pub degraded_loops: Vec<usize>,
    /// A refinement answer was too short and the previous list was kept.
    pub carried_forward: bool,
    pub error: Option<TraceError>,
}

impl LoopTrace {
    pub fn is_truncated(&self) -> bool {
        self.loops_executed < self.loops_requested
    }

    /// The list a run stopped after `loops` refinements would have produced.
    pub fn list_after(&self, loops: usize) -> Option<&RankedList> {
        if self.lists.is_empty() {
            None
        } else if loops >= self.loops_executed {
            Some(&self.final_list)
        } else {
            self.lists.get(loops)
        }
    }
}

/// One request/response exchange, for transcripts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request_id: String,
    pub user_id: String,
    pub loop_index: usize,
    pub system: String,
    pub prompt: String,
    pub response: Option<String>,
    pub error: Option<String>,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopRun {
    pub trace: LoopTrace,
    pub transcript: Vec<TranscriptEntry>,
}

/// Shared resources for running loops.
#[derive(Clone, Copy)]
pub struct LoopContext<'a> {
    pub critic: &'a CriticModel,
    pub provider: &'a dyn EmbeddingProvider,
    pub catalog: &'a Catalog,
    pub backend: &'a dyn LlmBackend,
    pub prompts: &'a PromptBuilder,
}

struct Exchange {
    list: Option<RankedList>,
    degraded: bool,
    record: CallRecord,
    error: Option<(String, bool)>,
    transcript: TranscriptEntry,
}

fn exchange(ctx: &LoopContext, mut req: ChatRequest, user_id: &str, loop_index: usize, n: usize) -> Exchange {
    req.request_id = format!("{user_id}/loop{loop_index}");
    let completion = ctx.backend.complete(&req);
    let mut record = completion.record;
    let mut transcript = TranscriptEntry {
        request_id: req.request_id.clone(),
        user_id: user_id.to_string(),
        loop_index,
        system: req.system,
        prompt: req.user,
        response: None,
        error: None,
        latency_ms: record.latency_ms,
    };
    let text = match completion.result {
        Ok(t) => t,
        Err(e) => {
            record.outcome = CallOutcome::Error;
            transcript.error = Some(e.to_string());
            return Exchange { list: None, degraded: false, record, error: Some((e.to_string(), true)), transcript };
        }
    };
    transcript.response = Some(text.clone());
    match parse_ranked_list(&text, n) {
        Ok(parsed) => {
            if parsed.degraded {
                record.outcome = CallOutcome::ParseDegraded;
            }
            let mut list = parsed.list;
            list.source = if loop_index == 0 { ListSource::Initial } else { ListSource::Refined(loop_index) };
            Exchange { list: Some(list), degraded: parsed.degraded, record, error: None, transcript }
        }
        Err(e) => {
            record.outcome = CallOutcome::Error;
            transcript.error = Some(e.to_string());
            Exchange { list: None, degraded: true, record, error: Some((e.to_string(), false)), transcript }
        }
    }
}

/// Initial recommendation followed by `cfg.loops` critic-guided refinements.
/// Backend failures truncate the trace instead of failing the call.
pub fn run_loop(ctx: &LoopContext, inst: &EvalInstance, cfg: &LoopConfig) -> Result<LoopRun, LoopError> {
    if inst.history.is_empty() {
        return Err(LoopError::EmptyHistory(inst.user_id.clone()));
    }
    if cfg.n == 0 {
        return Err(LoopError::ZeroCount);
    }
    let candidates = if cfg.candidate_mode {
        Some(inst.candidate_set.as_deref().ok_or_else(|| LoopError::MissingCandidates(inst.user_id.clone()))?)
    } else {
        None
    };
    let h = &inst.history;
    let scale = ctx.critic.scale();
    let mut trace = LoopTrace {
        user_id: inst.user_id.clone(),
        instance: inst.to_stored(),
        loops_requested: cfg.loops,
        loops_executed: 0,
        lists: Vec::new(),
        feedback: Vec::new(),
        calls: Vec::new(),
        final_list: RankedList { entries: Vec::new(), source: ListSource::Initial },
        degraded_loops: Vec::new(),
        carried_forward: false,
        error: None,
    };
    let mut transcript = Vec::new();

    let first = exchange(ctx, ctx.prompts.initial(h, cfg.n, candidates), &inst.user_id, 0, cfg.n);
    trace.calls.push(first.record);
    transcript.push(first.transcript);
    if first.degraded {
        trace.degraded_loops.push(0);
    }
    let Some(mut current) = first.list else {
        let (message, backend) = first.error.unwrap_or_default();
        trace.error = Some(TraceError { loop_index: 0, message, backend });
        return Ok(LoopRun { trace, transcript });
    };
    trace.lists.push(current.clone());

    for i in 0..cfg.loops {
        let fb = score_recommendations(ctx.critic, ctx.provider, h, &current, ctx.catalog, i);
        let req = match ctx.prompts.refinement(h, &current, &fb, scale, cfg.n, candidates) {
            Ok(r) => r,
            Err(e) => {
                trace.feedback.push(fb);
                trace.error = Some(TraceError { loop_index: i + 1, message: e.to_string(), backend: false });
                break;
            }
        };
        trace.feedback.push(fb);
        let ex = exchange(ctx, req, &inst.user_id, i + 1, cfg.n);
        trace.calls.push(ex.record);
        transcript.push(ex.transcript);
        if ex.degraded {
            trace.degraded_loops.push(i + 1);
        }
        match ex.list {
            Some(list) if list.len() * 2 >= cfg.n => {
                trace.lists.push(list.clone());
                current = list;
                trace.loops_executed = i + 1;
            }
            Some(list) => {
                trace.lists.push(list);
                trace.loops_executed = i + 1;
                trace.carried_forward = true;
                break;
            }
            None => {
                let (message, backend) = ex.error.unwrap_or_default();
                if backend {
                    trace.error = Some(TraceError { loop_index: i + 1, message, backend });
                } else {
                    trace.loops_executed = i + 1;
                    trace.carried_forward = true;
                }
                break;
            }
        }
    }
    trace.final_list = current;
    Ok(LoopRun { trace, transcript })
}

/// Runs every instance, at most `backend.max_in_flight()` at a time; output
/// order follows input order.
pub fn run_users(ctx: &LoopContext, instances: &[EvalInstance], cfg: &LoopConfig) -> Vec<Result<LoopRun, LoopError>> {
    use rayon::prelude::*;
    let threads = ctx.backend.max_in_flight().max(1);
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| instances.par_iter().map(|inst| run_loop(ctx, inst, cfg)).collect()),
        Err(e) => {
            log::warn!("falling back to sequential execution: {e}");
            instances.iter().map(|inst| run_loop(ctx, inst, cfg)).collect()
        }
    }
}
