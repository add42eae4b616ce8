//! Planted-structure benchmark data: users in latent clusters that each
//! prefer one genre, rating items by a fixed latent-factor rule plus noise.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Dataset, Interaction, Item, RatingScale, UserHistory};

const GENRES: [(&str, [&str; 10]); 4] = [
    ("science fiction", ["Star", "Orbit", "Nebula", "Quantum", "Android", "Galaxy", "Comet", "Rocket", "Void", "Cyborg"]),
    ("romance", ["Love", "Heart", "Paris", "Wedding", "Kiss", "Summer", "Letters", "Promise", "Bride", "Sweetheart"]),
    ("western", ["Dust", "Saddle", "Outlaw", "Canyon", "Sheriff", "Frontier", "Mesa", "Gunsmoke", "Rodeo", "Prairie"]),
    ("horror", ["Crypt", "Shadow", "Haunting", "Skull", "Coffin", "Nightmare", "Ghoul", "Curse", "Phantom", "Bones"]),
];
const DIRECTORS: [&str; 8] = [
    "Ada Brooks", "Ben Okafor", "Chloe Martin", "Dev Patel", "Eva Lindqvist", "Femi Adeyemi", "Gus Moreau", "Hana Sato",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Number of latent user clusters (each prefers one genre); at most 4.
    pub clusters: usize,
    pub users_per_cluster: usize,
    pub items_per_user: usize,
    pub catalog_items: usize,
    /// Probability that a rating level is replaced by a different random level.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { clusters: 2, users_per_cluster: 200, items_per_user: 30, catalog_items: 160, label_noise: 0.1, seed: 11 }
    }
}

/// Genre index and reception of a synthetic item, recovered from its attributes.
pub fn item_traits(item: &Item) -> Option<(usize, bool)> {
    let genre = item.attributes.iter().find(|(k, _)| k == "genre")?;
    let g = GENRES.iter().position(|(name, _)| *name == genre.1)?;
    let acclaimed = item.attributes.iter().any(|(k, v)| k == "reception" && v == "acclaimed");
    Some((g, acclaimed))
}

/// Noise-free rating on the 1–5 scale: liked genre → 5 (acclaimed) or 4,
/// other genres → 2 (acclaimed) or 1.
pub fn planted_rating(cluster: usize, genre: usize, acclaimed: bool) -> f64 {
    match (cluster == genre, acclaimed) {
        (true, true) => 5.0,
        (true, false) => 4.0,
        (false, true) => 2.0,
        (false, false) => 1.0,
    }
}

/// Cluster of a synthetic user id (`c{cluster}-u{n}`).
pub fn user_cluster(user_id: &str) -> Option<usize> {
    user_id.strip_prefix('c')?.split('-').next()?.parse().ok()
}

pub fn generate(cfg: &SyntheticConfig) -> Dataset {
    assert!((1..=GENRES.len()).contains(&cfg.clusters), "1 to {} clusters supported", GENRES.len());
    assert!(cfg.items_per_user <= cfg.catalog_items, "users cannot rate more items than exist");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = RatingScale::books();

    let mut items = Vec::with_capacity(cfg.catalog_items);
    let mut used = std::collections::HashSet::new();
    for i in 0..cfg.catalog_items {
        let genre = i % cfg.clusters;
        let words = &GENRES[genre].1;
        let title = loop {
            let a = words.choose(&mut rng).expect("non-empty");
            let b = words.choose(&mut rng).expect("non-empty");
            let year = rng.gen_range(1970..2020);
            let t = format!("{a} {b} ({year})");
            if a != b && used.insert(t.clone()) {
                break t;
            }
        };
        let acclaimed = rng.gen_bool(0.5);
        items.push(
            Item::from_title(format!("s{i:04}"), title)
                .with_attribute("genre", GENRES[genre].0)
                .with_attribute("reception", if acclaimed { "acclaimed" } else { "panned" })
                .with_attribute("directedBy", *DIRECTORS.choose(&mut rng).expect("non-empty")),
        );
    }
    let catalog = Catalog::new(items);
    let all: Vec<_> = catalog.items().cloned().collect();

    let mut users = Vec::new();
    for n in 0..cfg.users_per_cluster {
        for cluster in 0..cfg.clusters {
            let mut picks: Vec<_> = all.choose_multiple(&mut rng, cfg.items_per_user).cloned().collect();
            picks.sort_by(|a, b| a.id.cmp(&b.id));
            let interactions = picks
                .into_iter()
                .map(|item| {
                    let (genre, acclaimed) = item_traits(&item).expect("synthetic item");
                    let mut level = scale.level_index(planted_rating(cluster, genre, acclaimed)).expect("on scale");
                    if rng.gen_bool(cfg.label_noise) {
                        let shift = rng.gen_range(1..scale.levels());
                        level = (level + shift) % scale.levels();
                    }
                    Interaction { item, rating: scale.level_to_rating(level) }
                })
                .collect();
            users.push(UserHistory::new(format!("c{cluster}-u{n:04}"), interactions));
        }
    }
    Dataset::new("synthetic", scale, catalog, users).expect("generated data is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_determinism() {
        let cfg = SyntheticConfig { users_per_cluster: 10, ..SyntheticConfig::default() };
        let d = generate(&cfg);
        assert_eq!(d.users.len(), 20);
        assert!(d.users.iter().all(|u| u.len() == 30));
        assert_eq!(d.catalog.len(), 160);
        assert_eq!(generate(&cfg), d);
        assert_eq!(user_cluster("c1-u0003"), Some(1));
    }

    #[test]
    fn noise_rate_is_close_to_configured() {
        let d = generate(&SyntheticConfig::default());
        let (mut flipped, mut total) = (0, 0);
        for u in &d.users {
            let c = user_cluster(&u.user_id).unwrap();
            for it in &u.interactions {
                let (g, a) = item_traits(&it.item).unwrap();
                total += 1;
                flipped += usize::from(it.rating != planted_rating(c, g, a));
            }
        }
        let rate = flipped as f64 / total as f64;
        assert!((rate - 0.1).abs() < 0.02, "{rate}");
    }
}
