use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CriticError;
use crate::catalog::{Item, RatingScale, UserHistory};
use crate::embedder::EmbeddingProvider;

/// Nonzero entries of an embedding.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct SparseVec {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseVec {
    pub fn from_dense(values: &[f64]) -> Self {
        let (idx, val) = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i, *v))
            .unzip();
        Self { idx, val }
    }
}

/// Embeddings keyed by item text, so repeated items are embedded once.
pub(crate) struct FeatureCache<'a> {
    provider: &'a dyn EmbeddingProvider,
    map: HashMap<String, std::sync::Arc<SparseVec>>,
}

impl<'a> FeatureCache<'a> {
    pub fn new(provider: &'a dyn EmbeddingProvider) -> Self {
        Self { provider, map: HashMap::new() }
    }

    pub fn get(&mut self, item: &Item) -> Result<std::sync::Arc<SparseVec>, CriticError> {
        let text = item.embedding_text();
        if let Some(v) = self.map.get(&text) {
            return Ok(v.clone());
        }
        let e = self.provider.embed_text(&text)?;
        let v = std::sync::Arc::new(SparseVec::from_dense(e.values()));
        self.map.insert(text, v.clone());
        Ok(v)
    }
}

/// Encoded model input: history items (ascending item id) with rating
/// levels, plus the candidate item.
pub(crate) struct Input {
    pub history: Vec<(std::sync::Arc<SparseVec>, usize)>,
    pub candidate: std::sync::Arc<SparseVec>,
}

impl Input {
    pub fn build(
        cache: &mut FeatureCache<'_>,
        scale: &RatingScale,
        history: &UserHistory,
        candidate: &Item,
    ) -> Result<Self, CriticError> {
        if history.is_empty() {
            return Err(CriticError::EmptyHistory);
        }
        let mut sorted: Vec<_> = history.interactions.iter().collect();
        sorted.sort_by(|a, b| a.item.id.cmp(&b.item.id));
        let history = sorted
            .into_iter()
            .map(|it| {
                let level = scale
                    .level_index(it.rating)
                    .ok_or(CriticError::OffScaleRating(it.rating))?;
                Ok((cache.get(&it.item)?, level))
            })
            .collect::<Result<_, CriticError>>()?;
        Ok(Self { history, candidate: cache.get(candidate)? })
    }
}

/// Parameter blocks. Weight matrices are stored input-major: row `i` holds
/// the weights from input unit `i` to every output unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// (dim + levels) × hidden
    pub hist_w: Vec<f64>,
    pub hist_b: Vec<f64>,
    /// dim × hidden
    pub cand_w: Vec<f64>,
    pub cand_b: Vec<f64>,
    /// 3·hidden × levels, over [history; candidate; history ⊙ candidate]
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

pub const BLOCK_NAMES: [&str; 6] = ["hist_w", "hist_b", "cand_w", "cand_b", "out_w", "out_b"];

impl Params {
    pub fn zeros(dim: usize, hidden: usize, levels: usize) -> Self {
        Self {
            hist_w: vec![0.0; (dim + levels) * hidden],
            hist_b: vec![0.0; hidden],
            cand_w: vec![0.0; dim * hidden],
            cand_b: vec![0.0; hidden],
            out_w: vec![0.0; 3 * hidden * levels],
            out_b: vec![0.0; levels],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(dim: usize, hidden: usize, levels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(dim, hidden, levels);
        let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            w.iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
        };
        fill(&mut p.hist_w, dim + levels, hidden);
        fill(&mut p.cand_w, dim, hidden);
        fill(&mut p.out_w, 3 * hidden, levels);
        p
    }

    pub fn blocks(&self) -> [&Vec<f64>; 6] {
        [&self.hist_w, &self.hist_b, &self.cand_w, &self.cand_b, &self.out_w, &self.out_b]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.hist_w,
            &mut self.hist_b,
            &mut self.cand_w,
            &mut self.cand_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn zeroed_like(&self) -> Self {
        let mut z = self.clone();
        z.blocks_mut().into_iter().for_each(|b| b.iter_mut().for_each(|v| *v = 0.0));
        z
    }
}

/// Intermediate values kept for the backward pass.
pub(crate) struct Forward {
    pub hist_pre: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
    pub cand_pre: Vec<f64>,
    pub cand: Vec<f64>,
    pub features: Vec<f64>,
    pub probs: Vec<f64>,
}

pub(crate) fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// z = b + Σ_k x_k · W[k, :] over the nonzeros of x.
fn affine_sparse(w: &[f64], b: &[f64], x: &SparseVec, out_dim: usize) -> Vec<f64> {
    let mut z = b.to_vec();
    for (&k, &xk) in x.idx.iter().zip(&x.val) {
        let row = &w[k * out_dim..(k + 1) * out_dim];
        z.iter_mut().zip(row).for_each(|(zi, wi)| *zi += xk * wi);
    }
    z
}

pub(crate) struct Shape {
    pub dim: usize,
    pub hidden: usize,
    pub levels: usize,
}

pub(crate) fn history_pre(p: &Params, s: &Shape, emb: &SparseVec, level: usize) -> Vec<f64> {
    let mut z = affine_sparse(&p.hist_w, &p.hist_b, emb, s.hidden);
    let row = &p.hist_w[(s.dim + level) * s.hidden..(s.dim + level + 1) * s.hidden];
    z.iter_mut().zip(row).for_each(|(zi, wi)| *zi += wi);
    z
}

/// Mean of ReLU(history pre-activations), summed in input order.
pub(crate) fn pool(hist_pre: &[Vec<f64>], hidden: usize) -> Vec<f64> {
    let mut pooled = vec![0.0; hidden];
    for z in hist_pre {
        pooled.iter_mut().zip(z).for_each(|(acc, &zi)| *acc += relu(zi));
    }
    let n = hist_pre.len() as f64;
    pooled.iter_mut().for_each(|v| *v /= n);
    pooled
}

pub(crate) fn forward(p: &Params, s: &Shape, input: &Input) -> Forward {
    let hist_pre: Vec<Vec<f64>> =
        input.history.iter().map(|(e, l)| history_pre(p, s, e, *l)).collect();
    let pooled = pool(&hist_pre, s.hidden);
    let (cand_pre, cand, features, probs) = head(p, s, &pooled, &input.candidate);
    Forward { hist_pre, pooled, cand_pre, cand, features, probs }
}

/// Candidate branch and output layer for an already pooled history.
pub(crate) fn head(
    p: &Params,
    s: &Shape,
    pooled: &[f64],
    candidate: &SparseVec,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let cand_pre = affine_sparse(&p.cand_w, &p.cand_b, candidate, s.hidden);
    let cand: Vec<f64> = cand_pre.iter().map(|&v| relu(v)).collect();

    let mut features = Vec::with_capacity(3 * s.hidden);
    features.extend_from_slice(pooled);
    features.extend_from_slice(&cand);
    features.extend(pooled.iter().zip(&cand).map(|(h, c)| h * c));

    let mut logits = p.out_b.clone();
    for (f, &x) in features.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let row = &p.out_w[f * s.levels..(f + 1) * s.levels];
        logits.iter_mut().zip(row).for_each(|(l, w)| *l += x * w);
    }
    let probs = softmax(&logits);
    (cand_pre, cand, features, probs)
}

/// Accumulates `scale ·` ∂(−log p[label])/∂θ into `grad`; returns the loss.
pub(crate) fn backward(
    p: &Params,
    s: &Shape,
    input: &Input,
    fwd: &Forward,
    label: usize,
    scale: f64,
    grad: &mut Params,
) -> f64 {
    let h = s.hidden;
    let loss = -fwd.probs[label].max(f64::MIN_POSITIVE).ln();

    let mut dlogits: Vec<f64> = fwd.probs.iter().map(|q| q * scale).collect();
    dlogits[label] -= scale;

    for (g, d) in grad.out_b.iter_mut().zip(&dlogits) {
        *g += d;
    }
    let mut dfeat = vec![0.0; 3 * h];
    for (f, &x) in fwd.features.iter().enumerate() {
        let row = &p.out_w[f * s.levels..(f + 1) * s.levels];
        let grow = &mut grad.out_w[f * s.levels..(f + 1) * s.levels];
        let mut acc = 0.0;
        for l in 0..s.levels {
            grow[l] += x * dlogits[l];
            acc += row[l] * dlogits[l];
        }
        dfeat[f] = acc;
    }

    let mut dpooled = vec![0.0; h];
    let mut dcand = vec![0.0; h];
    for i in 0..h {
        dpooled[i] = dfeat[i] + dfeat[2 * h + i] * fwd.cand[i];
        dcand[i] = dfeat[h + i] + dfeat[2 * h + i] * fwd.pooled[i];
    }

    let dcand_pre: Vec<f64> = dcand
        .iter()
        .zip(&fwd.cand_pre)
        .map(|(d, &z)| if z > 0.0 { *d } else { 0.0 })
        .collect();
    grad.cand_b.iter_mut().zip(&dcand_pre).for_each(|(g, d)| *g += d);
    let cand = &input.candidate;
    for (&k, &xk) in cand.idx.iter().zip(&cand.val) {
        let grow = &mut grad.cand_w[k * h..(k + 1) * h];
        grow.iter_mut().zip(&dcand_pre).for_each(|(g, d)| *g += xk * d);
    }

    let n = input.history.len() as f64;
    for ((emb, level), z) in input.history.iter().zip(&fwd.hist_pre) {
        let dz: Vec<f64> = dpooled
            .iter()
            .zip(z)
            .map(|(d, &zi)| if zi > 0.0 { d / n } else { 0.0 })
            .collect();
        grad.hist_b.iter_mut().zip(&dz).for_each(|(g, d)| *g += d);
        for (&k, &xk) in emb.idx.iter().zip(&emb.val) {
            let grow = &mut grad.hist_w[k * h..(k + 1) * h];
            grow.iter_mut().zip(&dz).for_each(|(g, d)| *g += xk * d);
        }
        let r = s.dim + level;
        let grow = &mut grad.hist_w[r * h..(r + 1) * h];
        grow.iter_mut().zip(&dz).for_each(|(g, d)| *g += d);
    }
    loss
}
