use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{render_ranked_list, CallOutcome, CallRecord, ChatRequest, Completion, LlmBackend, ListSource, RankedList};
use crate::catalog::{normalize_title, Catalog, Dataset, ItemId};
use crate::embedder::tokenize;
use crate::util::{mix64, seeded_hash};

/// Tuning for the deterministic stand-in model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockConfig {
    pub seed: u64,
    /// Weight of the per-user uniform noise added to log-popularity.
    pub noise: f64,
    /// Titles estimated below `keep_fraction * max` are replaced on refinement.
    pub keep_fraction: f64,
    pub latency_base_ms: f64,
    pub latency_per_token_ms: f64,
    pub max_in_flight: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        Self { seed: 9, noise: 2.0, keep_fraction: 0.7, latency_base_ms: 350.0, latency_per_token_ms: 1.5, max_in_flight: 8 }
    }
}

type Key = (String, Option<i32>);

struct MockItem {
    title: String,
    tokens: BTreeSet<String>,
    prior: f64,
}

/// Deterministic backend that answers from a catalog. Initial requests get a
/// popularity-plus-noise ranking; requests carrying critic feedback get the
/// well-rated titles back in estimate order, with the rest replaced by items
/// sharing the most words with the liked titles and the fewest with the
/// disliked ones. The request protocol it reads:
/// history records are lines starting with `{`, candidates are `- Title`
/// lines, feedback lines end in `— estimated rating r/max`, and the count
/// comes from `exactly N`.
pub struct MockBackend {
    config: MockConfig,
    items: Vec<MockItem>,
    by_key: HashMap<Key, usize>,
}

fn key(title: &str) -> Key {
    let n = normalize_title(title);
    (n.canonical, n.year)
}

fn feedback_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:\d+\.\s+)?(.+?) — (?:estimated rating ([0-9.]+)/([0-9.]+)|no estimate)\s*$").expect("valid regex")
    })
}

fn count_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"exactly (\d+)").expect("valid regex"))
}

struct Feedback {
    title: String,
    estimate: Option<f64>,
    max: f64,
}

struct ParsedPrompt {
    n: usize,
    user_key: u64,
    history: HashSet<Key>,
    candidates: Vec<Key>,
    feedback: Vec<Feedback>,
}

fn read_prompt(text: &str) -> ParsedPrompt {
    let mut history = HashSet::new();
    let mut candidates = Vec::new();
    let mut feedback = Vec::new();
    let mut user_key = 0xcbf2_9ce4_8422_2325u64;
    for line in text.lines() {
        let t = line.trim();
        if t.starts_with('{') {
            user_key = seeded_hash(t.as_bytes(), user_key);
            if let Ok(v) = serde_json::from_str::<serde_json::Value>(t) {
                if let Some(title) = v.get("title").and_then(|x| x.as_str()) {
                    history.insert(key(title));
                }
            }
        } else if let Some(c) = feedback_line().captures(t) {
            let num = |i| c.get(i).and_then(|m: regex::Match| m.as_str().parse::<f64>().ok());
            feedback.push(Feedback { title: c[1].to_string(), estimate: num(2), max: num(3).unwrap_or(f64::NAN) });
        } else if let Some(title) = t.strip_prefix("- ") {
            candidates.push(key(title));
        }
    }
    let n = count_line().captures(text).and_then(|c| c[1].parse().ok()).unwrap_or(10);
    ParsedPrompt { n, user_key, history, candidates, feedback }
}

impl MockBackend {
    pub fn new(catalog: &Catalog, popularity: &BTreeMap<ItemId, usize>, config: MockConfig) -> Self {
        let mut items = Vec::with_capacity(catalog.len());
        let mut by_key = HashMap::new();
        for item in catalog.items() {
            let title = item.display_title();
            if by_key.insert(key(&title), items.len()).is_some() {
                continue;
            }
            let pop = popularity.get(&item.id).copied().unwrap_or(0) as f64;
            items.push(MockItem { tokens: tokenize(&item.embedding_text()).collect(), title, prior: pop.ln_1p() });
        }
        Self { config, items, by_key }
    }

    pub fn from_dataset(d: &Dataset, config: MockConfig) -> Self {
        Self::new(&d.catalog, &d.popularity(), config)
    }

    fn noise(&self, user_key: u64, idx: usize) -> f64 {
        let h = mix64(seeded_hash(self.items[idx].title.as_bytes(), self.config.seed ^ user_key));
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    fn base_score(&self, user_key: u64, idx: usize) -> f64 {
        self.items[idx].prior + self.config.noise * self.noise(user_key, idx)
    }

    fn pool(&self, p: &ParsedPrompt, exclude: &HashSet<Key>) -> Vec<usize> {
        let allowed: Vec<usize> = if p.candidates.is_empty() {
            (0..self.items.len()).collect()
        } else {
            p.candidates.iter().filter_map(|k| self.by_key.get(k).copied()).collect()
        };
        let mut seen = HashSet::new();
        allowed
            .into_iter()
            .filter(|&i| seen.insert(i))
            .filter(|&i| {
                let k = key(&self.items[i].title);
                !p.history.contains(&k) && !exclude.contains(&k)
            })
            .collect()
    }

    fn tokens_of(&self, title: &str) -> BTreeSet<String> {
        match self.by_key.get(&key(title)) {
            Some(&i) => self.items[i].tokens.clone(),
            None => tokenize(title).collect(),
        }
    }

    fn rank_by<F: Fn(usize) -> f64>(pool: &mut [usize], score: F) {
        pool.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    }

    fn answer(&self, p: &ParsedPrompt) -> Vec<String> {
        if p.feedback.is_empty() {
            let mut pool = self.pool(p, &HashSet::new());
            Self::rank_by(&mut pool, |i| self.base_score(p.user_key, i));
            return pool.into_iter().take(p.n).map(|i| self.items[i].title.clone()).collect();
        }

        let mut kept: Vec<(usize, &Feedback)> = Vec::new();
        let mut unscored = Vec::new();
        let (mut liked, mut disliked) = (BTreeSet::new(), BTreeSet::new());
        for (pos, f) in p.feedback.iter().enumerate() {
            match f.estimate {
                Some(r) if r >= self.config.keep_fraction * f.max => {
                    liked.extend(self.tokens_of(&f.title));
                    kept.push((pos, f));
                }
                Some(_) => disliked.extend(self.tokens_of(&f.title)),
                None => unscored.push(f.title.clone()),
            }
        }
        kept.sort_by(|a, b| {
            let (ra, rb) = (a.1.estimate.unwrap_or(0.0), b.1.estimate.unwrap_or(0.0));
            rb.total_cmp(&ra).then(a.0.cmp(&b.0))
        });
        let mut out: Vec<String> = kept.iter().map(|(_, f)| f.title.clone()).collect();
        out.extend(unscored);
        out.truncate(p.n);

        let exclude: HashSet<Key> = p.feedback.iter().map(|f| key(&f.title)).collect();
        let good: BTreeSet<&String> = liked.difference(&disliked).collect();
        let bad: BTreeSet<&String> = disliked.difference(&liked).collect();
        let mut pool = self.pool(p, &exclude);
        let affinity = |i: usize| {
            let t = &self.items[i].tokens;
            t.iter().filter(|w| good.contains(w)).count() as f64 - t.iter().filter(|w| bad.contains(w)).count() as f64
        };
        pool.sort_by(|&a, &b| {
            affinity(b)
                .total_cmp(&affinity(a))
                .then(self.base_score(p.user_key, b).total_cmp(&self.base_score(p.user_key, a)))
                .then(a.cmp(&b))
        });
        let need = p.n.saturating_sub(out.len());
        out.extend(pool.into_iter().take(need).map(|i| self.items[i].title.clone()));
        out
    }

    /// Response text for a request; also used to reproduce transcripts.
    pub fn respond(&self, req: &ChatRequest) -> String {
        let parsed = read_prompt(&req.user);
        render_ranked_list(&RankedList::from_titles(self.answer(&parsed), ListSource::Initial))
    }

    fn latency(&self, req: &ChatRequest, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        let jitter = (mix64(seeded_hash(req.user.as_bytes(), self.config.seed)) >> 11) as f64 / (1u64 << 53) as f64;
        self.config.latency_base_ms * (0.9 + 0.2 * jitter)
            + self.config.latency_per_token_ms * (prompt_tokens + completion_tokens) as f64
    }
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl LlmBackend for MockBackend {
    fn complete(&self, req: &ChatRequest) -> Completion {
        if let Err(e) = req.validate() {
            let record = CallRecord {
                request_id: req.request_id.clone(),
                latency_ms: 0.0,
                prompt_tokens: None,
                completion_tokens: None,
                outcome: CallOutcome::Error,
            };
            return Completion { result: Err(e), record };
        }
        let text = self.respond(req);
        let prompt_tokens = word_count(&req.system) + word_count(&req.user);
        let completion_tokens = word_count(&text);
        let record = CallRecord {
            request_id: req.request_id.clone(),
            latency_ms: self.latency(req, prompt_tokens, completion_tokens),
            prompt_tokens: Some(prompt_tokens),
            completion_tokens: Some(completion_tokens),
            outcome: CallOutcome::Ok,
        };
        Completion { result: Ok(text), record }
    }

    fn max_in_flight(&self) -> usize {
        self.config.max_in_flight.max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{Interaction, Item, UserHistory};
    use crate::llm::parse_ranked_list;

    fn catalog() -> Catalog {
        let mut items = Vec::new();
        for i in 0..20 {
            let genre = if i % 2 == 0 { "western" } else { "horror" };
            items.push(Item::from_title(format!("i{i:02}"), format!("Title {i} ({})", 1980 + i)).with_attribute("genre", genre));
        }
        Catalog::new(items)
    }

    fn mock() -> MockBackend {
        let c = catalog();
        let pop = c.items().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
        MockBackend::new(&c, &pop, MockConfig::default())
    }

    fn request(user: String) -> ChatRequest {
        ChatRequest { request_id: "r".into(), system: "s".into(), user, model: "m".into(), temperature: 0.0, max_tokens: 10 }
    }

    fn history_prompt(n: usize) -> String {
        let c = catalog();
        let it = c.get(&ItemId::from("i00")).unwrap().clone();
        let h = UserHistory::new("u", vec![Interaction { item: it, rating: 5.0 }]);
        crate::llm::PromptBuilder::default().initial(&h, n, None).user
    }

    #[test]
    fn deterministic_and_excludes_history() {
        let m = mock();
        let a = m.complete(&request(history_prompt(10)));
        let b = m.complete(&request(history_prompt(10)));
        let text = a.result.unwrap();
        assert_eq!(text, b.result.unwrap());
        assert_eq!(a.record, b.record);
        let list = parse_ranked_list(&text, 10).unwrap();
        assert_eq!(list.list.len(), 10);
        assert!(!text.contains("Title 0 (1980)"));
    }

    #[test]
    fn candidate_mode_stays_in_set() {
        let m = mock();
        let user = format!("{}\n- Title 3 (1983)\n- Title 5 (1985)\n- Unknown (1900)", history_prompt(10));
        let text = m.respond(&request(user));
        let titles: HashSet<_> = text.lines().map(|l| l.split_once(". ").unwrap().1).collect();
        assert_eq!(titles, HashSet::from(["Title 3 (1983)", "Title 5 (1985)"]));
    }

    #[test]
    fn refinement_orders_by_estimate_and_substitutes_low() {
        let m = mock();
        let user = format!(
            "{}\n1. Title 2 (1982) — estimated rating 4.0/5.0\n2. Title 3 (1983) — estimated rating 1.0/5.0\n3. Title 4 (1984) — estimated rating 5.0/5.0",
            history_prompt(3)
        );
        let text = m.respond(&request(user));
        let titles: Vec<_> = text.lines().map(|l| l.split_once(". ").unwrap().1.to_string()).collect();
        assert_eq!(&titles[..2], ["Title 4 (1984)", "Title 2 (1982)"]);
        // the replacement shares the liked genre
        let idx: usize = titles[2].split(' ').nth(1).unwrap().parse().unwrap();
        assert_eq!(idx % 2, 0, "{titles:?}");
        assert!(!titles.contains(&"Title 3 (1983)".to_string()));
    }

    #[test]
    fn latency_is_simulated_and_positive() {
        let c = mock().complete(&request(history_prompt(5)));
        assert!(c.record.latency_ms > 300.0);
        assert_eq!(c.record.outcome, CallOutcome::Ok);
    }

    #[test]
    fn history_items_not_recommended_with_small_catalog() {
        let m = mock();
        let text = m.respond(&request(history_prompt(50)));
        assert_eq!(text.lines().count(), 19);
    }
}
