use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{self, FeatureCache, Input, Params, Shape};
use super::{argmax_lowest, CriticError, CriticModel, ModelRole, TrainSample};
use crate::catalog::RatingScale;
use crate::embedder::EmbeddingProvider;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, epochs: 30, batch_size: 64, hidden: 128, seed: 42, patience: 5 }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), CriticError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CriticError::InvalidConfig("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(CriticError::InvalidConfig("epochs, batch size and hidden width must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_samples: usize,
    pub val_samples: usize,
    /// Validation accuracy of the initial parameters.
    pub initial_val_accuracy: Option<f64>,
    pub epochs: Vec<EpochLog>,
    /// 0 means the initial parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    /// Mean training cross-entropy of the returned parameters.
    pub final_train_loss: f64,
}

impl TrainLog {
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("log serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

struct Adam {
    m: Params,
    v: Params,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(like: &Params, lr: f64) -> Self {
        Self { m: like.zeroed_like(), v: like.zeroed_like(), t: 0, lr }
    }

    fn step(&mut self, params: &mut Params, grad: &Params) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let blocks = params.blocks_mut().into_iter().zip(grad.blocks());
        for ((p, g), (m, v)) in blocks.zip(self.m.blocks_mut().into_iter().zip(self.v.blocks_mut())) {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        }
    }
}

fn encode(
    cache: &mut FeatureCache<'_>,
    model: &CriticModel,
    samples: &[TrainSample],
) -> Result<Vec<(Input, usize)>, CriticError> {
    samples
        .iter()
        .map(|s| {
            if s.level >= model.levels() {
                return Err(CriticError::LabelOutOfRange { label: s.level, levels: model.levels() });
            }
            Ok((Input::build(cache, model.scale(), &s.history, &s.target)?, s.level))
        })
        .collect()
}

fn accuracy(params: &Params, shape: &Shape, data: &[(Input, usize)]) -> Option<f64> {
    if data.is_empty() {
        return None;
    }
    let correct = data
        .iter()
        .filter(|(input, label)| argmax_lowest(&model::forward(params, shape, input).probs) == *label)
        .count();
    Some(correct as f64 / data.len() as f64)
}

fn mean_loss(params: &Params, shape: &Shape, data: &[(Input, usize)]) -> f64 {
    let total: f64 = data
        .iter()
        .map(|(input, label)| -model::forward(params, shape, input).probs[*label].max(f64::MIN_POSITIVE).ln())
        .sum();
    total / data.len() as f64
}

/// Minibatch Adam on mean cross-entropy. Keeps the parameters with the best
/// validation accuracy (the initial parameters included); without a
/// validation set the last epoch wins. Deterministic under `cfg.seed`.
pub fn train(
    scale: RatingScale,
    trainset: &[TrainSample],
    valset: &[TrainSample],
    cfg: &TrainConfig,
    p: &dyn EmbeddingProvider,
) -> Result<(CriticModel, TrainLog), CriticError> {
    cfg.validate()?;
    if trainset.is_empty() {
        return Err(CriticError::EmptyTrainingSet);
    }
    let mut model = CriticModel::new(scale, p.dim(), cfg.hidden, p.fingerprint(), cfg.seed);
    fit(&mut model, trainset, valset, cfg, p)
}

/// Same training path as [`train`], tagged as an oracle model.
pub fn train_oracle(
    scale: RatingScale,
    trainset: &[TrainSample],
    valset: &[TrainSample],
    cfg: &TrainConfig,
    p: &dyn EmbeddingProvider,
) -> Result<(CriticModel, TrainLog), CriticError> {
    let (mut model, log) = train(scale, trainset, valset, cfg, p)?;
    model.set_role(ModelRole::Oracle);
    Ok((model, log))
}

fn fit(
    model: &mut CriticModel,
    trainset: &[TrainSample],
    valset: &[TrainSample],
    cfg: &TrainConfig,
    p: &dyn EmbeddingProvider,
) -> Result<(CriticModel, TrainLog), CriticError> {
    let mut cache = FeatureCache::new(p);
    let train_data = encode(&mut cache, model, trainset)?;
    let val_data = encode(&mut cache, model, valset)?;
    let shape = model.shape();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let mut params = model.params().clone();

    let initial_val_accuracy = accuracy(&params, &shape, &val_data);
    let mut best = (0usize, initial_val_accuracy, params.clone());
    let mut since_best = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_data.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grad = params.zeroed_like();
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (input, label) = &train_data[i];
                let fwd = model::forward(&params, &shape, input);
                batch_loss += model::backward(&params, &shape, input, &fwd, *label, scale, &mut grad);
            }
            if !batch_loss.is_finite() {
                return Err(CriticError::NonFiniteLoss { epoch, batch: b, loss: batch_loss });
            }
            epoch_loss += batch_loss;
            adam.step(&mut params, &grad);
        }
        if !params.is_finite() {
            return Err(CriticError::NonFiniteLoss { epoch, batch: usize::MAX, loss: f64::NAN });
        }
        let val_accuracy = accuracy(&params, &shape, &val_data);
        let train_loss = epoch_loss / train_data.len() as f64;
        log::debug!("epoch {epoch}: loss {train_loss:.4} val acc {val_accuracy:?}");
        epochs.push(EpochLog { epoch, train_loss, val_accuracy });

        match (val_accuracy, best.1) {
            (Some(acc), Some(best_acc)) if acc > best_acc => {
                best = (epoch, Some(acc), params.clone());
                since_best = 0;
            }
            (None, _) => best = (epoch, None, params.clone()),
            _ => {
                since_best += 1;
                if since_best >= cfg.patience.max(1) {
                    break;
                }
            }
        }
    }

    let (best_epoch, best_val_accuracy, best_params) = best;
    *model.params_mut() = best_params;
    model.quantize_to_f32();
    let final_train_loss = mean_loss(model.params(), &shape, &train_data);
    let log = TrainLog {
        train_samples: train_data.len(),
        val_samples: val_data.len(),
        initial_val_accuracy,
        epochs,
        best_epoch,
        best_val_accuracy,
        final_train_loss,
    };
    model.set_log_digest(log.digest());
    Ok((model.clone(), log))
}
