//! Shared fixtures for the benchmarks under `benches/`.

use std::sync::Arc;

use recritic::catalog::{split_users, Item, SplitRatios, UserHistory};
use recritic::critic::{build_samples, train, CriticModel, TrainConfig, TrainSample};
use recritic::embedder::HashedProvider;
use recritic::llm::{render_ranked_list, ListSource, RankedList};
use recritic::synthetic::{generate, SyntheticConfig};

pub struct Fixture {
    pub provider: HashedProvider,
    pub samples: Vec<TrainSample>,
    pub model: CriticModel,
    pub history: UserHistory,
    pub candidates: Vec<Arc<Item>>,
    pub list_text: String,
}

/// Small synthetic world with a briefly trained critic.
pub fn fixture() -> Fixture {
    let data = generate(&SyntheticConfig { users_per_cluster: 60, ..SyntheticConfig::default() });
    let provider = HashedProvider::default();
    let (tr, va, _) = split_users(&data, SplitRatios::default(), 1).expect("split");
    let (samples, _) = build_samples(&tr, 20, None, 1);
    let (val, _) = build_samples(&va, 20, None, 1);
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let (model, _) = train(data.scale, &samples, &val, &cfg, &provider).expect("train");
    let history = samples[0].history.clone();
    let candidates: Vec<Arc<Item>> = data.catalog.items().take(10).cloned().collect();
    let list = RankedList::from_titles(candidates.iter().map(|i| i.display_title()).collect::<Vec<_>>(), ListSource::Initial);
    let list_text = render_ranked_list(&list);
    Fixture { provider, samples, model, history, candidates, list_text }
}
