use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Catalog, CatalogError, Dataset, Interaction, Item, ItemId, UserHistory};
use crate::util::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

/// Splits users into disjoint (train, val, test) datasets. Validation and test
/// sizes are floored; the remainder goes to train. Each partition keeps the
/// original user order.
pub fn split_users(
    d: &Dataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset), CatalogError> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !r.is_finite() || *r < 0.0)
        || (train + val + test - 1.0).abs() > 1e-9
    {
        return Err(CatalogError::InvalidRatios((train, val, test)));
    }
    let n = d.users.len();
    let partitions = [train, val, test].iter().filter(|r| **r > 0.0).count();
    if n < partitions {
        return Err(CatalogError::TooFewUsers { users: n, partitions });
    }

    let n_val = (n as f64 * val + 1e-9).floor() as usize;
    let n_test = (n as f64 * test + 1e-9).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val_idx = order[..n_val].to_vec();
    let mut test_idx = order[n_val..n_val + n_test].to_vec();
    let mut train_idx = order[n_val + n_test..].to_vec();
    for v in [&mut train_idx, &mut val_idx, &mut test_idx] {
        v.sort_unstable();
    }
    let pick = |idx: &[usize]| d.with_users(idx.iter().map(|&i| d.users[i].clone()).collect());
    Ok((pick(&train_idx), pick(&val_idx), pick(&test_idx)))
}

/// Keeps a seeded random subset of `n` users (all of them when `n` is not
/// smaller), in the original order.
pub fn sample_users(d: &Dataset, n: usize, seed: u64) -> Dataset {
    if n >= d.users.len() {
        return d.clone();
    }
    let mut order: Vec<usize> = (0..d.users.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, "users")));
    let mut keep = order[..n].to_vec();
    keep.sort_unstable();
    d.with_users(keep.into_iter().map(|i| d.users[i].clone()).collect())
}

/// Per-user seed so a user's sampled history depends only on (seed, user_id).
pub fn user_seed(seed: u64, user_id: &str) -> u64 {
    derive_seed(seed, user_id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalInstance {
    pub user_id: String,
    pub history: UserHistory,
    pub held_out: Vec<Interaction>,
    pub candidate_set: Option<Vec<Arc<Item>>>,
}

impl EvalInstance {
    pub fn held_out_rating(&self, id: &ItemId) -> Option<f64> {
        self.held_out.iter().find(|i| &i.item.id == id).map(|i| i.rating)
    }

    pub fn in_candidate_set(&self, id: &ItemId) -> bool {
        self.candidate_set.as_ref().is_some_and(|c| c.iter().any(|i| &i.id == id))
    }

    pub fn to_stored(&self) -> StoredInstance {
        let pairs = |xs: &[Interaction]| xs.iter().map(|i| (i.item.id.clone(), i.rating)).collect();
        StoredInstance {
            user_id: self.user_id.clone(),
            history: pairs(&self.history.interactions),
            held_out: pairs(&self.held_out),
            candidate_set: self
                .candidate_set
                .as_ref()
                .map(|c| c.iter().map(|i| i.id.clone()).collect()),
        }
    }
}

/// Id-only form of an [`EvalInstance`] for persisted traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredInstance {
    pub user_id: String,
    pub history: Vec<(ItemId, f64)>,
    pub held_out: Vec<(ItemId, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_set: Option<Vec<ItemId>>,
}

impl StoredInstance {
    pub fn restore(&self, catalog: &Catalog) -> Result<EvalInstance, CatalogError> {
        let item = |id: &ItemId| {
            catalog.get(id).cloned().ok_or_else(|| CatalogError::UnknownItem(id.clone()))
        };
        let interactions = |xs: &[(ItemId, f64)]| -> Result<Vec<Interaction>, CatalogError> {
            xs.iter().map(|(id, r)| Ok(Interaction { item: item(id)?, rating: *r })).collect()
        };
        Ok(EvalInstance {
            user_id: self.user_id.clone(),
            history: UserHistory::new(self.user_id.clone(), interactions(&self.history)?),
            held_out: interactions(&self.held_out)?,
            candidate_set: self
                .candidate_set
                .as_ref()
                .map(|c| c.iter().map(item).collect::<Result<_, _>>())
                .transpose()?,
        })
    }
}

/// A user with too few ratings to sample a history plus at least one held-out item.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("user {user_id} has {have} interactions, needs at least {need}")]
pub struct SkippedUser {
    pub user_id: String,
    pub have: usize,
    pub need: usize,
}

/// Draws `k` history interactions without replacement; the rest are held out.
pub fn sample_eval_instance(
    u: &UserHistory,
    k: usize,
    seed: u64,
) -> Result<EvalInstance, SkippedUser> {
    if u.len() <= k {
        return Err(SkippedUser { user_id: u.user_id.clone(), have: u.len(), need: k + 1 });
    }
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(user_seed(seed, &u.user_id)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    let chosen_set: HashSet<usize> = chosen.iter().copied().collect();

    let history = chosen.iter().map(|&i| u.interactions[i].clone()).collect();
    let held_out = (0..u.len())
        .filter(|i| !chosen_set.contains(i))
        .map(|i| u.interactions[i].clone())
        .collect();
    Ok(EvalInstance {
        user_id: u.user_id.clone(),
        history: UserHistory::new(u.user_id.clone(), history),
        held_out,
        candidate_set: None,
    })
}

/// Candidate set of `size` items: the user's held-out rated items (a random
/// subset if there are more than `size`) topped up with random catalog items
/// the user has not rated, shuffled.
pub fn build_candidate_set(
    instance: &EvalInstance,
    catalog: &Catalog,
    size: usize,
    seed: u64,
) -> Vec<Arc<Item>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("cands:{}", instance.user_id)));
    let mut rated: Vec<Arc<Item>> = instance.held_out.iter().map(|i| i.item.clone()).collect();
    rated.shuffle(&mut rng);
    rated.truncate(size);

    let known: HashSet<&ItemId> = instance
        .history
        .interactions
        .iter()
        .chain(&instance.held_out)
        .map(|i| &i.item.id)
        .collect();
    let mut distractors: Vec<Arc<Item>> =
        catalog.items().filter(|i| !known.contains(&i.id)).cloned().collect();
    distractors.shuffle(&mut rng);

    let missing = size.saturating_sub(rated.len());
    rated.extend(distractors.into_iter().take(missing));
    rated.shuffle(&mut rng);
    rated
}
