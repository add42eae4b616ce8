use std::collections::HashSet;
use std::sync::Arc;

use super::Item;

/// Minimum trigram similarity for a fuzzy title match.
pub const FUZZY_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizedTitle {
    pub canonical: String,
    pub year: Option<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resolution {
    Exact(Arc<Item>),
    Fuzzy { item: Arc<Item>, score: f64 },
    Unresolved,
}

impl Resolution {
    pub fn item(&self) -> Option<&Arc<Item>> {
        match self {
            Resolution::Exact(item) | Resolution::Fuzzy { item, .. } => Some(item),
            Resolution::Unresolved => None,
        }
    }
}

/// Lowercases, trims, collapses whitespace and strips punctuation (keeping
/// apostrophes between letters). A trailing `(YYYY)` becomes the year.
pub fn normalize_title(raw: &str) -> NormalizedTitle {
    let trimmed = raw.trim();
    let (body, year) = split_trailing_year(trimmed);

    let chars: Vec<char> = body
        .chars()
        .map(|c| if c == '\u{2019}' { '\'' } else { c })
        .flat_map(char::to_lowercase)
        .collect();
    let mut cleaned = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() {
            cleaned.push(c);
        } else if c == '\'' {
            let prev = i > 0 && chars[i - 1].is_alphanumeric();
            let next = chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            cleaned.push(if prev && next { '\'' } else { ' ' });
        } else {
            cleaned.push(' ');
        }
    }
    let canonical = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");
    NormalizedTitle { canonical, year }
}

fn split_trailing_year(s: &str) -> (&str, Option<i32>) {
    let b = s.as_bytes();
    let n = b.len();
    if n >= 6
        && b[n - 1] == b')'
        && b[n - 6] == b'('
        && b[n - 5..n - 1].iter().all(u8::is_ascii_digit)
    {
        let year = s[n - 5..n - 1].parse().ok();
        return (&s[..n - 6], year);
    }
    (s, None)
}

fn trigrams(s: &str) -> HashSet<[char; 3]> {
    let padded: Vec<char> = "  ".chars().chain(s.chars()).chain(" ".chars()).collect();
    padded.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

/// Sørensen–Dice coefficient over padded character trigram sets, in `[0, 1]`.
pub fn trigram_similarity(a: &str, b: &str) -> f64 {
    if a == b {
        return 1.0;
    }
    let ta = trigrams(a);
    let tb = trigrams(b);
    let shared = ta.intersection(&tb).count();
    2.0 * shared as f64 / (ta.len() + tb.len()) as f64
}
