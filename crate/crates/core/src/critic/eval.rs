use serde::{Deserialize, Serialize};

use super::model::{self, FeatureCache, Input};
use super::{argmax_lowest, CriticError, CriticModel, TrainSample};
use crate::embedder::EmbeddingProvider;

/// Per-class true positive, false positive and false negative counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn new(levels: usize) -> Self {
        Self { tp: vec![0; levels], fp: vec![0; levels], fn_: vec![0; levels] }
    }

    pub fn record(&mut self, predicted: usize, actual: usize) {
        if predicted == actual {
            self.tp[actual] += 1;
        } else {
            self.fp[predicted] += 1;
            self.fn_[actual] += 1;
        }
    }

    /// Σ TP / Σ (TP + FP)
    pub fn micro_accuracy(&self) -> f64 {
        let tp: u64 = self.tp.iter().sum();
        let fp: u64 = self.fp.iter().sum();
        ratio(tp, tp + fp)
    }

    /// Σ TP / Σ (TP + FN)
    pub fn micro_recall(&self) -> f64 {
        let tp: u64 = self.tp.iter().sum();
        let fn_: u64 = self.fn_.iter().sum();
        ratio(tp, tp + fn_)
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticEvaluation {
    pub confusion: ConfusionCounts,
    pub micro_accuracy: f64,
    pub micro_recall: f64,
    /// correct / total
    pub accuracy: f64,
    pub samples: usize,
}

/// Micro metrics from (predicted, actual) level pairs.
pub fn micro_metrics(pairs: &[(usize, usize)], levels: usize) -> CriticEvaluation {
    let mut confusion = ConfusionCounts::new(levels);
    let mut correct = 0;
    for &(pred, actual) in pairs {
        confusion.record(pred, actual);
        correct += usize::from(pred == actual);
    }
    CriticEvaluation {
        micro_accuracy: confusion.micro_accuracy(),
        micro_recall: confusion.micro_recall(),
        accuracy: ratio(correct as u64, pairs.len() as u64),
        samples: pairs.len(),
        confusion,
    }
}

pub fn evaluate_critic(
    m: &CriticModel,
    p: &dyn EmbeddingProvider,
    testset: &[TrainSample],
) -> Result<CriticEvaluation, CriticError> {
    m.check_provider(p)?;
    let mut cache = FeatureCache::new(p);
    let shape = m.shape();
    let mut pairs = Vec::with_capacity(testset.len());
    for s in testset {
        if s.level >= m.levels() {
            return Err(CriticError::LabelOutOfRange { label: s.level, levels: m.levels() });
        }
        let input = Input::build(&mut cache, m.scale(), &s.history, &s.target)?;
        let probs = model::forward(m.params(), &shape, &input).probs;
        pairs.push((argmax_lowest(&probs), s.level));
    }
    Ok(micro_metrics(&pairs, m.levels()))
}
