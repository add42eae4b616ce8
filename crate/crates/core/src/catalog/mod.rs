//! Interaction datasets: rating scales, item catalog, per-user histories,
//! JSONL loading, user splits, evaluation sampling and title resolution.

mod io;
mod sampling;
mod scale;
mod title;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{load_dataset, write_dataset, DatasetMeta, LoadOptions, LoadSummary, Schema};
pub use sampling::{
    build_candidate_set, sample_eval_instance, sample_users, split_users, user_seed, EvalInstance, SkippedUser,
    SplitRatios, StoredInstance,
};
pub use scale::RatingScale;
pub use title::{normalize_title, trigram_similarity, NormalizedTitle, Resolution, FUZZY_THRESHOLD};

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("invalid rating scale min={min} max={max} step={step}")]
    InvalidScale { min: f64, max: f64, step: f64 },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid dataset sidecar {path}: {reason}")]
    Sidecar { path: String, reason: String },
    #[error(
        "{malformed} of {total} records malformed (threshold {threshold}); first bad line {line}: {reason}"
    )]
    TooManyMalformed { malformed: usize, total: usize, threshold: f64, line: usize, reason: String },
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    InvalidRatios((f64, f64, f64)),
    #[error("{users} users cannot fill {partitions} non-empty partitions")]
    TooFewUsers { users: usize, partitions: usize },
    #[error("interaction references unknown item {0}")]
    UnknownItem(ItemId),
    #[error("duplicate item {item} in history of user {user}")]
    DuplicateInteraction { user: String, item: ItemId },
    #[error("rating {rating} is off-scale")]
    OffScale { rating: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub String);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<String> for ItemId {
    fn from(s: String) -> Self {
        ItemId(s)
    }
}

impl From<&str> for ItemId {
    fn from(s: &str) -> Self {
        ItemId(s.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: ItemId,
    pub title: String,
    pub year: Option<i32>,
    /// Ordered (field, value) pairs, e.g. `directedBy`, `starring`.
    pub attributes: Vec<(String, String)>,
}

impl Item {
    /// Item with only a title; the year is parsed from a trailing `(YYYY)`.
    pub fn from_title(id: impl Into<String>, title: impl Into<String>) -> Self {
        let title = title.into();
        let year = normalize_title(&title).year;
        Self { id: ItemId(id.into()), title, year, attributes: Vec::new() }
    }

    pub fn with_attribute(mut self, field: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.push((field.into(), value.into()));
        self
    }

    /// "Title (Year)" form used in prompts and ranked lists.
    pub fn display_title(&self) -> String {
        match self.year {
            Some(y) if normalize_title(&self.title).year != Some(y) => format!("{} ({y})", self.title),
            _ => self.title.clone(),
        }
    }

    /// Text fed to the embedder: `title. field1: value1. field2: value2.`
    pub fn embedding_text(&self) -> String {
        let mut text = format!("{}.", self.title);
        for (k, v) in &self.attributes {
            text.push_str(&format!(" {k}: {v}."));
        }
        text
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interaction {
    pub item: Arc<Item>,
    pub rating: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserHistory {
    pub user_id: String,
    pub interactions: Vec<Interaction>,
}

impl UserHistory {
    pub fn new(user_id: impl Into<String>, interactions: Vec<Interaction>) -> Self {
        Self { user_id: user_id.into(), interactions }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn rating_of(&self, id: &ItemId) -> Option<f64> {
        self.interactions.iter().find(|i| &i.item.id == id).map(|i| i.rating)
    }
}

/// Immutable item catalog with a title index for resolving free text.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    items: BTreeMap<ItemId, Arc<Item>>,
    by_title: HashMap<(String, Option<i32>), ItemId>,
    normalized: Vec<(ItemId, NormalizedTitle)>,
}

impl PartialEq for Catalog {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
    }
}

impl Catalog {
    pub fn new(items: impl IntoIterator<Item = Item>) -> Self {
        let mut catalog = Catalog::default();
        for item in items {
            catalog.insert(item);
        }
        catalog
    }

    /// Adds an item; the first item with a given id wins.
    pub fn insert(&mut self, item: Item) -> Arc<Item> {
        if let Some(existing) = self.items.get(&item.id) {
            return existing.clone();
        }
        let norm = normalize_title(&item.display_title());
        self.by_title
            .entry((norm.canonical.clone(), norm.year))
            .or_insert_with(|| item.id.clone());
        self.normalized.push((item.id.clone(), norm));
        let item = Arc::new(item);
        self.items.insert(item.id.clone(), item.clone());
        item
    }

    pub fn get(&self, id: &ItemId) -> Option<&Arc<Item>> {
        self.items.get(id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items in ascending id order.
    pub fn items(&self) -> impl Iterator<Item = &Arc<Item>> {
        self.items.values()
    }

    /// Exact match on (canonical title, year), else best trigram match at or
    /// above [`FUZZY_THRESHOLD`] with compatible years, else unresolved.
    pub fn resolve_item(&self, raw_title: &str) -> Resolution {
        let query = normalize_title(raw_title);
        if query.canonical.is_empty() {
            return Resolution::Unresolved;
        }
        if let Some(id) = self.by_title.get(&(query.canonical.clone(), query.year)) {
            return Resolution::Exact(self.items[id].clone());
        }
        let mut best: Option<(&ItemId, f64)> = None;
        for (id, norm) in &self.normalized {
            if let (Some(a), Some(b)) = (query.year, norm.year) {
                if a != b {
                    continue;
                }
            }
            let score = trigram_similarity(&query.canonical, &norm.canonical);
            // ties go to the lowest id
            let better = match best {
                None => true,
                Some((bid, bs)) => score > bs || (score == bs && id < bid),
            };
            if better {
                best = Some((id, score));
            }
        }
        match best {
            Some((id, score)) if score >= FUZZY_THRESHOLD => {
                Resolution::Fuzzy { item: self.items[id].clone(), score }
            }
            _ => Resolution::Unresolved,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub scale: RatingScale,
    pub catalog: Catalog,
    pub users: Vec<UserHistory>,
}

impl Dataset {
    /// Builds a dataset, checking catalog membership, scale and per-user uniqueness.
    pub fn new(
        name: impl Into<String>,
        scale: RatingScale,
        catalog: Catalog,
        users: Vec<UserHistory>,
    ) -> Result<Self, CatalogError> {
        for user in &users {
            let mut seen = std::collections::HashSet::new();
            for it in &user.interactions {
                if catalog.get(&it.item.id).is_none() {
                    return Err(CatalogError::UnknownItem(it.item.id.clone()));
                }
                if scale.level_index(it.rating).is_none() {
                    return Err(CatalogError::OffScale { rating: it.rating });
                }
                if !seen.insert(&it.item.id) {
                    return Err(CatalogError::DuplicateInteraction {
                        user: user.user_id.clone(),
                        item: it.item.id.clone(),
                    });
                }
            }
        }
        Ok(Self { name: name.into(), scale, catalog, users })
    }

    /// Number of ratings per item, used as a popularity prior.
    pub fn popularity(&self) -> BTreeMap<ItemId, usize> {
        let mut counts: BTreeMap<ItemId, usize> =
            self.catalog.items().map(|i| (i.id.clone(), 0)).collect();
        for u in &self.users {
            for it in &u.interactions {
                *counts.entry(it.item.id.clone()).or_default() += 1;
            }
        }
        counts
    }

    /// Same catalog and scale with a different user list.
    pub fn with_users(&self, users: Vec<UserHistory>) -> Dataset {
        Dataset { name: self.name.clone(), scale: self.scale, catalog: self.catalog.clone(), users }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> Catalog {
        Catalog::new([
            Item::from_title("1", "Jurassic Park (1993)"),
            Item::from_title("2", "Gladiator (2000)"),
            Item::from_title("3", "Die Hard (1988)"),
            Item::from_title("4", "Blade (1998)"),
            Item::from_title("5", "Jurassic Park III (2001)"),
        ])
    }

    #[test]
    fn exact_resolution() {
        let c = catalog();
        assert!(matches!(c.resolve_item("Jurassic Park (1993)"), Resolution::Exact(i) if i.id.0 == "1"));
        assert!(matches!(
            c.resolve_item("  jurassic    park (1993) "),
            Resolution::Exact(i) if i.id.0 == "1"
        ));
    }

    #[test]
    fn fuzzy_typo_resolution() {
        let c = catalog();
        match c.resolve_item("Jurasic Park (1993)") {
            Resolution::Fuzzy { item, score } => {
                assert_eq!(item.id.0, "1");
                assert!(score >= 0.85, "{score}");
            }
            other => panic!("expected fuzzy, got {other:?}"),
        }
    }

    #[test]
    fn year_mismatch_rejects() {
        let c = catalog();
        assert_eq!(c.resolve_item("Gladiator (2005)"), Resolution::Unresolved);
        assert_eq!(c.resolve_item("Twin Peaks: Fire Walker Stunt Double (2015)"), Resolution::Unresolved);
        assert_eq!(c.resolve_item(""), Resolution::Unresolved);
    }

    #[test]
    fn missing_year_falls_back_to_fuzzy() {
        let c = catalog();
        match c.resolve_item("Die Hard") {
            Resolution::Fuzzy { item, score } => {
                assert_eq!(item.id.0, "3");
                assert_eq!(score, 1.0);
            }
            other => panic!("expected fuzzy, got {other:?}"),
        }
    }

    #[test]
    fn display_and_embedding_text() {
        let it = Item::from_title("a", "Airheads (1994)")
            .with_attribute("directedBy", "Michael Lehmann");
        assert_eq!(it.display_title(), "Airheads (1994)");
        assert_eq!(it.embedding_text(), "Airheads (1994). directedBy: Michael Lehmann.");
        let mut book = Item::from_title("b", "Dune");
        book.year = Some(1965);
        assert_eq!(book.display_title(), "Dune (1965)");
        assert_eq!(Item::from_title("c", "Solo").embedding_text(), "Solo.");
    }

    #[test]
    fn dataset_rejects_unknown_items() {
        let c = catalog();
        let stray = Arc::new(Item::from_title("zz", "Nope"));
        let u = UserHistory::new("u", vec![Interaction { item: stray, rating: 4.0 }]);
        assert!(matches!(
            Dataset::new("d", RatingScale::movies(), c, vec![u]),
            Err(CatalogError::UnknownItem(_))
        ));
    }
}
