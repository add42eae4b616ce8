use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;

use super::{LlmError, ListSource, RankedList};
use crate::catalog::normalize_title;

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedList {
    pub list: RankedList,
    /// Fewer than the requested number of items were found.
    pub degraded: bool,
}

fn rank_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\d{1,3})(?:\s*[.):]\s*|\s+[-–—]\s+|\s+)(.+)$").expect("valid regex"))
}

fn through_year() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r#"^(.*?\(\d{4}\)["'”*_`]*)"#).expect("valid regex"))
}

fn clean_title(raw: &str) -> String {
    let mut title = raw.trim();
    if let Some(c) = through_year().captures(title) {
        title = c.get(1).map_or(title, |m| m.as_str());
    } else {
        for sep in [" — ", " – ", " - "] {
            if let Some(i) = title.find(sep) {
                title = &title[..i];
            }
        }
    }
    unwrap_pairs(title.trim()).to_string()
}

/// Removes quotes or emphasis markers that wrap the whole title.
fn unwrap_pairs(mut t: &str) -> &str {
    const PAIRS: [(char, char); 6] = [('"', '"'), ('\'', '\''), ('“', '”'), ('*', '*'), ('_', '_'), ('`', '`')];
    loop {
        let before = t;
        for (open, close) in PAIRS {
            if t.chars().count() >= 2 && t.starts_with(open) && t.ends_with(close) {
                t = t[open.len_utf8()..t.len() - close.len_utf8()].trim();
            }
        }
        if t == before {
            return t;
        }
    }
}

fn rank_title(line: &str) -> Option<String> {
    let mut line = line.replace("**", "").replace("__", "");
    loop {
        let t = line.trim_start();
        let stripped = t
            .strip_prefix("- ")
            .or_else(|| t.strip_prefix("* "))
            .or_else(|| t.strip_prefix("+ "))
            .or_else(|| t.strip_prefix("• "))
            .or_else(|| t.strip_prefix('#'));
        match stripped {
            Some(rest) => line = rest.to_string(),
            None => {
                line = t.to_string();
                break;
            }
        }
    }
    let caps = rank_line().captures(line.trim_end())?;
    let title = clean_title(caps.get(2)?.as_str());
    (!title.is_empty()).then_some(title)
}

/// Parses numbered lines (`k`, `k.`, `k)`, `k -`), ignoring markdown bullets
/// and bold. Keeps the first `n` distinct titles (by normalized title) and
/// renumbers them 1..m.
pub fn parse_ranked_list(text: &str, n: usize) -> Result<ParsedList, LlmError> {
    let mut seen = HashSet::new();
    let mut titles = Vec::new();
    for line in text.lines() {
        if titles.len() == n {
            break;
        }
        let Some(title) = rank_title(line) else { continue };
        let norm = normalize_title(&title);
        if seen.insert((norm.canonical, norm.year)) {
            titles.push(title);
        }
    }
    if titles.is_empty() {
        return Err(LlmError::Parse);
    }
    let degraded = titles.len() < n;
    Ok(ParsedList { list: RankedList::from_titles(titles, ListSource::Initial), degraded })
}

/// Canonical `rank. Title` form, one entry per line.
pub fn render_ranked_list(list: &RankedList) -> String {
    list.entries.iter().map(|e| format!("{}. {}", e.rank, e.raw_title)).collect::<Vec<_>>().join("\n")
}
