//! The recommendation critic: a multiclass rating-level classifier over a
//! user's embedded, rated history and a candidate item's embedding.
//!
//! History items are encoded one by one (`[embedding; one-hot level]` →
//! ReLU) and mean-pooled, the candidate gets its own ReLU layer, and a
//! softmax layer reads `[history; candidate; history ⊙ candidate]`.

mod eval;
mod model;
mod persist;
mod train;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::catalog::{sample_eval_instance, user_seed, Dataset, Item, ItemId, RatingScale, UserHistory};
use crate::embedder::{EmbedError, EmbeddingProvider};

pub use eval::{evaluate_critic, micro_metrics, ConfusionCounts, CriticEvaluation};
pub use model::{Params, BLOCK_NAMES};
pub use persist::{load_model, save_model, LoadCheck, MODEL_FORMAT_VERSION, MODEL_MAGIC};
pub use train::{train, train_oracle, EpochLog, TrainConfig, TrainLog};

use model::{FeatureCache, Input, Shape};

#[derive(Debug, Error)]
pub enum CriticError {
    #[error("history is empty")]
    EmptyHistory,
    #[error("provider fingerprint {actual} does not match model fingerprint {expected}")]
    FingerprintMismatch { expected: String, actual: String },
    #[error("provider dimension {actual} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("rating {0} is not on the model's scale")]
    OffScaleRating(f64),
    #[error("label {label} out of range for {levels} levels")]
    LabelOutOfRange { label: usize, levels: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (loss {loss})")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a critic model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    Critic,
    Oracle,
}

/// Estimated rating for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticScore {
    pub item_id: ItemId,
    pub title: String,
    pub distribution: Vec<f64>,
    pub estimated_level: usize,
    pub estimated_rating: f64,
}

/// Index of the largest probability; ties go to the lowest level.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One supervised example: a user's history, a target item, and its true level.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub history: UserHistory,
    pub target: Arc<Item>,
    pub level: usize,
}

/// Builds samples by drawing a `k`-item history per user and using up to
/// `targets_per_user` of the held-out items as targets (all when `None`).
/// Users with too few ratings are skipped and counted.
pub fn build_samples(
    dataset: &Dataset,
    k: usize,
    targets_per_user: Option<usize>,
    seed: u64,
) -> (Vec<TrainSample>, usize) {
    let mut samples = Vec::new();
    let mut skipped = 0;
    for user in &dataset.users {
        let Ok(inst) = sample_eval_instance(user, k, seed) else {
            skipped += 1;
            continue;
        };
        let mut targets = inst.held_out.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(user_seed(seed ^ 0x007a_26e7, &user.user_id));
        targets.shuffle(&mut rng);
        if let Some(t) = targets_per_user {
            targets.truncate(t);
        }
        for t in targets {
            let level = dataset.scale.level_index(t.rating).expect("dataset ratings are on-scale");
            samples.push(TrainSample { history: inst.history.clone(), target: t.item, level });
        }
    }
    (samples, skipped)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticModel {
    scale: RatingScale,
    dim: usize,
    hidden: usize,
    role: ModelRole,
    fingerprint: String,
    params: Params,
    log_digest: String,
}

impl CriticModel {
    /// Fresh model with Glorot-initialized weights.
    pub fn new(scale: RatingScale, dim: usize, hidden: usize, fingerprint: impl Into<String>, seed: u64) -> Self {
        let params = Params::init(dim, hidden, scale.levels(), seed);
        Self::from_params(scale, dim, hidden, fingerprint, params)
    }

    /// Wraps explicit parameters. Panics when block sizes do not match the shape.
    pub fn from_params(
        scale: RatingScale,
        dim: usize,
        hidden: usize,
        fingerprint: impl Into<String>,
        params: Params,
    ) -> Self {
        let expected = Params::zeros(dim, hidden, scale.levels());
        for (name, (a, b)) in BLOCK_NAMES.iter().zip(params.blocks().iter().zip(expected.blocks())) {
            assert_eq!(a.len(), b.len(), "parameter block {name} has the wrong size");
        }
        Self {
            scale,
            dim,
            hidden,
            role: ModelRole::Critic,
            fingerprint: fingerprint.into(),
            params,
            log_digest: String::new(),
        }
    }

    pub fn scale(&self) -> &RatingScale {
        &self.scale
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn levels(&self) -> usize {
        self.scale.levels()
    }

    pub fn role(&self) -> ModelRole {
        self.role
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn log_digest(&self) -> &str {
        &self.log_digest
    }

    pub(crate) fn set_role(&mut self, role: ModelRole) {
        self.role = role;
    }

    pub(crate) fn set_log_digest(&mut self, digest: String) {
        self.log_digest = digest;
    }

    pub(crate) fn shape(&self) -> Shape {
        Shape { dim: self.dim, hidden: self.hidden, levels: self.levels() }
    }

    pub(crate) fn check_provider(&self, p: &dyn EmbeddingProvider) -> Result<(), CriticError> {
        if p.fingerprint() != self.fingerprint {
            return Err(CriticError::FingerprintMismatch {
                expected: self.fingerprint.clone(),
                actual: p.fingerprint(),
            });
        }
        if p.dim() != self.dim {
            return Err(CriticError::DimensionMismatch { expected: self.dim, actual: p.dim() });
        }
        Ok(())
    }

    /// Pooled history representation (`hidden` values).
    pub fn encode_history(&self, p: &dyn EmbeddingProvider, h: &UserHistory) -> Result<Vec<f64>, CriticError> {
        self.check_provider(p)?;
        if h.is_empty() {
            return Err(CriticError::EmptyHistory);
        }
        let mut cache = FeatureCache::new(p);
        let shape = self.shape();
        let mut sorted: Vec<_> = h.interactions.iter().collect();
        sorted.sort_by(|a, b| a.item.id.cmp(&b.item.id));
        let mut pre = Vec::with_capacity(sorted.len());
        for it in sorted {
            let level = self.scale.level_index(it.rating).ok_or(CriticError::OffScaleRating(it.rating))?;
            pre.push(model::history_pre(&self.params, &shape, &*cache.get(&it.item)?, level));
        }
        Ok(model::pool(&pre, self.hidden))
    }

    /// Probability of each rating level for `item` given the history.
    pub fn predict_distribution(
        &self,
        p: &dyn EmbeddingProvider,
        h: &UserHistory,
        item: &Item,
    ) -> Result<Vec<f64>, CriticError> {
        self.check_provider(p)?;
        let mut cache = FeatureCache::new(p);
        let input = Input::build(&mut cache, &self.scale, h, item)?;
        Ok(model::forward(&self.params, &self.shape(), &input).probs)
    }

    pub fn predict_rating(
        &self,
        p: &dyn EmbeddingProvider,
        h: &UserHistory,
        item: &Item,
    ) -> Result<CriticScore, CriticError> {
        let distribution = self.predict_distribution(p, h, item)?;
        Ok(self.score_from_distribution(item, distribution))
    }

    /// Scores several items against one history, encoding the history once.
    /// Results match [`CriticModel::predict_rating`] exactly.
    pub fn predict_many(
        &self,
        p: &dyn EmbeddingProvider,
        h: &UserHistory,
        items: &[&Item],
    ) -> Result<Vec<Result<CriticScore, CriticError>>, CriticError> {
        let pooled = self.encode_history(p, h)?;
        let shape = self.shape();
        let mut cache = FeatureCache::new(p);
        Ok(items
            .iter()
            .map(|item| {
                let cand = cache.get(item)?;
                let (_, _, _, probs) = model::head(&self.params, &shape, &pooled, &cand);
                Ok(self.score_from_distribution(item, probs))
            })
            .collect())
    }

    pub fn score_from_distribution(&self, item: &Item, distribution: Vec<f64>) -> CriticScore {
        let level = argmax_lowest(&distribution);
        CriticScore {
            item_id: item.id.clone(),
            title: item.display_title(),
            estimated_rating: self.scale.level_to_rating(level),
            estimated_level: level,
            distribution,
        }
    }

    /// Mean cross-entropy over `batch` and its gradient with respect to every
    /// parameter block.
    pub fn loss_and_gradient(
        &self,
        p: &dyn EmbeddingProvider,
        batch: &[TrainSample],
    ) -> Result<(f64, Params), CriticError> {
        self.check_provider(p)?;
        if batch.is_empty() {
            return Err(CriticError::EmptyTrainingSet);
        }
        let mut cache = FeatureCache::new(p);
        let shape = self.shape();
        let mut grad = self.params.zeroed_like();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for s in batch {
            if s.level >= self.levels() {
                return Err(CriticError::LabelOutOfRange { label: s.level, levels: self.levels() });
            }
            let input = Input::build(&mut cache, &self.scale, &s.history, &s.target)?;
            let fwd = model::forward(&self.params, &shape, &input);
            loss += scale * model::backward(&self.params, &shape, &input, &fwd, s.level, scale, &mut grad);
        }
        Ok((loss, grad))
    }

    /// Rounds every parameter to f32 precision so the model file stores it exactly.
    pub fn quantize_to_f32(&mut self) {
        for block in self.params.blocks_mut() {
            block.iter_mut().for_each(|v| *v = f64::from(*v as f32));
        }
    }
}

#[cfg(test)]
mod tests;
