use std::collections::HashMap;
use std::sync::Arc;

use super::*;
use crate::catalog::{Interaction, RatingScale};
use crate::embedder::{Embedding, HashedProvider};

/// Provider returning hand-set vectors by item title.
struct FixedProvider {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl EmbeddingProvider for FixedProvider {
    fn dim(&self) -> usize {
        self.dim
    }
    fn fingerprint(&self) -> String {
        format!("fixed/d{}", self.dim)
    }
    fn embed_text(&self, text: &str) -> Result<Embedding, EmbedError> {
        let title = text.split('.').next().unwrap_or_default();
        Embedding::new(self.table.get(title).cloned().unwrap_or_else(|| vec![0.0; self.dim]))
    }
}

fn item(id: &str, title: &str) -> Arc<Item> {
    Arc::new(Item::from_title(id, title))
}

fn history(pairs: &[(&str, f64)]) -> UserHistory {
    UserHistory::new(
        "u",
        pairs
            .iter()
            .map(|(t, r)| Interaction { item: item(&format!("id-{t}"), t), rating: *r })
            .collect(),
    )
}

fn scale3() -> RatingScale {
    RatingScale::new(1.0, 3.0, 1.0).unwrap()
}

// Hand-set tiny model, weights written output-major (W[out][in]).
const W_HIST: [[f64; 5]; 2] = [[0.5, -0.3, 0.2, 0.0, -0.1], [-0.4, 0.6, 0.0, 0.3, 0.25]];
const B_HIST: [f64; 2] = [0.1, -0.05];
const W_CAND: [[f64; 2]; 2] = [[0.7, -0.2], [0.3, 0.9]];
const B_CAND: [f64; 2] = [0.0, 0.1];
const W_OUT: [[f64; 6]; 3] = [
    [0.2, -0.5, 0.4, 0.1, 1.0, -0.3],
    [-0.1, 0.3, -0.2, 0.6, 0.0, 0.5],
    [0.4, 0.2, 0.1, -0.7, 0.3, 0.2],
];
const B_OUT: [f64; 3] = [0.05, -0.02, 0.0];

fn tiny_params() -> Params {
    let transpose = |w: &[&[f64]]| -> Vec<f64> {
        let (rows, cols) = (w.len(), w[0].len());
        (0..cols).flat_map(|c| (0..rows).map(move |r| (r, c))).map(|(r, c)| w[r][c]).collect()
    };
    Params {
        hist_w: transpose(&W_HIST.iter().map(|r| r.as_slice()).collect::<Vec<_>>()),
        hist_b: B_HIST.to_vec(),
        cand_w: transpose(&W_CAND.iter().map(|r| r.as_slice()).collect::<Vec<_>>()),
        cand_b: B_CAND.to_vec(),
        out_w: transpose(&W_OUT.iter().map(|r| r.as_slice()).collect::<Vec<_>>()),
        out_b: B_OUT.to_vec(),
    }
}

fn tiny_provider() -> FixedProvider {
    let table = [("A", vec![1.0, 0.0]), ("B", vec![0.6, 0.8]), ("C", vec![-0.5, 0.5])]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    FixedProvider { dim: 2, table }
}

/// Straight-line forward pass written from the architecture description.
fn hand_forward(hist: &[([f64; 2], usize)], cand: [f64; 2]) -> Vec<f64> {
    let relu = |x: f64| x.max(0.0);
    let mut pooled = [0.0; 2];
    for (e, level) in hist {
        let x = [e[0], e[1], (*level == 0) as u8 as f64, (*level == 1) as u8 as f64, (*level == 2) as u8 as f64];
        for h in 0..2 {
            let z: f64 = B_HIST[h] + (0..5).map(|i| W_HIST[h][i] * x[i]).sum::<f64>();
            pooled[h] += relu(z);
        }
    }
    pooled.iter_mut().for_each(|p| *p /= hist.len() as f64);
    let c: Vec<f64> = (0..2).map(|h| relu(B_CAND[h] + W_CAND[h][0] * cand[0] + W_CAND[h][1] * cand[1])).collect();
    let feat = [pooled[0], pooled[1], c[0], c[1], pooled[0] * c[0], pooled[1] * c[1]];
    let logits: Vec<f64> = (0..3).map(|l| B_OUT[l] + (0..6).map(|f| W_OUT[l][f] * feat[f]).sum::<f64>()).collect();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    logits.iter().map(|l| l.exp() / z).collect()
}

fn tiny_model() -> CriticModel {
    CriticModel::from_params(scale3(), 2, 2, "fixed/d2", tiny_params())
}

#[test]
fn tiny_model_matches_hand_evaluation() {
    let m = tiny_model();
    let p = tiny_provider();
    let h = history(&[("A", 3.0), ("B", 1.0)]);
    let got = m.predict_distribution(&p, &h, &item("x", "C")).unwrap();
    let expected = hand_forward(&[([1.0, 0.0], 2), ([0.6, 0.8], 0)], [-0.5, 0.5]);
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-9, "{got:?} vs {expected:?}");
    }
    let got = m.predict_distribution(&p, &history(&[("C", 2.0)]), &item("y", "B")).unwrap();
    let expected = hand_forward(&[([-0.5, 0.5], 1)], [0.6, 0.8]);
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-9);
    }
}

#[test]
fn single_item_history_pools_to_itself() {
    let m = tiny_model();
    let p = tiny_provider();
    let pooled = m.encode_history(&p, &history(&[("B", 2.0)])).unwrap();
    let x = [0.6, 0.8, 0.0, 1.0, 0.0];
    for h in 0..2 {
        let z: f64 = B_HIST[h] + (0..5).map(|i| W_HIST[h][i] * x[i]).sum::<f64>();
        assert!((pooled[h] - z.max(0.0)).abs() < 1e-12);
    }
}

#[test]
fn zero_weights_give_relu_bias() {
    let mut params = Params::zeros(2, 2, 3);
    params.hist_b = vec![0.7, -0.2];
    let m = CriticModel::from_params(scale3(), 2, 2, "fixed/d2", params);
    let pooled = m.encode_history(&tiny_provider(), &history(&[("A", 1.0), ("B", 2.0), ("C", 3.0)])).unwrap();
    assert!((pooled[0] - 0.7).abs() < 1e-15 && pooled[1] == 0.0, "{pooled:?}");
}

#[test]
fn zero_output_layer_is_uniform() {
    let p = HashedProvider::default();
    let mut m = CriticModel::new(RatingScale::movies(), 256, 8, p.fingerprint(), 3);
    m.params_mut().out_w.iter_mut().for_each(|v| *v = 0.0);
    m.params_mut().out_b.iter_mut().for_each(|v| *v = 0.0);
    let dist = m.predict_distribution(&p, &history(&[("Heat (1995)", 4.0)]), &item("o", "Alien (1979)")).unwrap();
    assert!(dist.iter().all(|&q| q == 0.1));
    let score = m.predict_rating(&p, &history(&[("Heat (1995)", 4.0)]), &item("o", "Alien (1979)")).unwrap();
    assert_eq!(score.estimated_level, 0);
    assert_eq!(score.estimated_rating, 0.5);
}

#[test]
fn rating_from_peaked_distribution() {
    let p = HashedProvider::default();
    let movies = CriticModel::new(RatingScale::movies(), 256, 4, p.fingerprint(), 1);
    let mut dist = vec![0.05; 10];
    dist[7] = 0.55;
    let s = movies.score_from_distribution(&item("a", "A"), dist);
    assert_eq!((s.estimated_level, s.estimated_rating), (7, 4.0));
    let books = CriticModel::new(RatingScale::books(), 256, 4, p.fingerprint(), 1);
    let s = books.score_from_distribution(&item("a", "A"), vec![0.1, 0.1, 0.1, 0.1, 0.6]);
    assert_eq!(s.estimated_rating, 5.0);
    assert_eq!(argmax_lowest(&[0.3, 0.3, 0.4]), 2);
    assert_eq!(argmax_lowest(&[0.4, 0.2, 0.4]), 0);
}

#[test]
fn distributions_are_normalized_and_order_free() {
    let p = HashedProvider::default();
    let m = CriticModel::new(RatingScale::movies(), 256, 16, p.fingerprint(), 9);
    let titles = ["Heat (1995)", "Alien (1979)", "Fargo (1996)", "Se7en (1995)", "Up (2009)"];
    let ratings = [4.0, 2.5, 5.0, 0.5, 3.0];
    let pairs: Vec<(&str, f64)> = titles.iter().copied().zip(ratings).collect();
    let mut reversed = pairs.clone();
    reversed.reverse();
    let target = item("t", "Brazil (1985)");
    let a = m.predict_distribution(&p, &history(&pairs), &target).unwrap();
    let b = m.predict_distribution(&p, &history(&reversed), &target).unwrap();
    assert_eq!(a, b);
    assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(a.iter().all(|&q| q > 0.0 && q < 1.0));
}

#[test]
fn rejects_foreign_provider_and_empty_history() {
    let m = tiny_model();
    let p = HashedProvider::default();
    assert!(matches!(
        m.predict_distribution(&p, &history(&[("A", 1.0)]), &item("x", "B")),
        Err(CriticError::FingerprintMismatch { .. })
    ));
    assert!(matches!(
        m.predict_distribution(&tiny_provider(), &history(&[]), &item("x", "B")),
        Err(CriticError::EmptyHistory)
    ));
    assert!(matches!(m.encode_history(&tiny_provider(), &history(&[])), Err(CriticError::EmptyHistory)));
}

fn tiny_batch() -> Vec<TrainSample> {
    vec![
        TrainSample { history: history(&[("A", 3.0), ("B", 1.0)]), target: item("c", "C"), level: 1 },
        TrainSample { history: history(&[("C", 2.0)]), target: item("a", "A"), level: 2 },
    ]
}

#[test]
fn gradient_matches_finite_differences() {
    let m = tiny_model();
    let p = tiny_provider();
    let batch = tiny_batch();
    let (_, grad) = m.loss_and_gradient(&p, &batch).unwrap();
    let loss = |m: &CriticModel| -> f64 {
        batch
            .iter()
            .map(|s| -m.predict_distribution(&p, &s.history, &s.target).unwrap()[s.level].ln())
            .sum::<f64>()
            / batch.len() as f64
    };
    let h = 1e-5;
    for b in 0..6 {
        for i in 0..grad.blocks()[b].len() {
            let mut plus = m.clone();
            plus.params_mut().blocks_mut()[b][i] += h;
            let mut minus = m.clone();
            minus.params_mut().blocks_mut()[b][i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = grad.blocks()[b][i];
            assert!((numeric - analytic).abs() < 1e-7, "block {} idx {i}: {analytic} vs {numeric}", BLOCK_NAMES[b]);
        }
    }
}

#[test]
fn memorizes_single_sample() {
    let p = HashedProvider::default();
    let sample = TrainSample {
        history: history(&[("Heat (1995)", 4.0), ("Alien (1979)", 2.0)]),
        target: item("t", "Fargo (1996)"),
        level: 6,
    };
    let cfg = TrainConfig { learning_rate: 0.01, epochs: 200, hidden: 16, ..TrainConfig::default() };
    let (_, log) = train(RatingScale::movies(), &[sample], &[], &cfg, &p).unwrap();
    assert_eq!(log.epochs.len(), 200);
    assert!(log.final_train_loss < 0.01, "{}", log.final_train_loss);
}

#[test]
fn training_is_deterministic() {
    let p = HashedProvider::default();
    let samples: Vec<TrainSample> = (0..12)
        .map(|i| TrainSample {
            history: history(&[("Heat (1995)", 4.0), ("Alien (1979)", 1.0 + (i % 4) as f64)]),
            target: item(&format!("t{i}"), &format!("Film {i}")),
            level: i % 5,
        })
        .collect();
    let cfg = TrainConfig { epochs: 5, hidden: 8, batch_size: 4, ..TrainConfig::default() };
    let (a, la) = train(RatingScale::books(), &samples, &samples[..4], &cfg, &p).unwrap();
    let (b, lb) = train(RatingScale::books(), &samples, &samples[..4], &cfg, &p).unwrap();
    assert_eq!(a.params(), b.params());
    assert_eq!(la, lb);
    assert!(la.best_val_accuracy >= la.initial_val_accuracy);

    let (oracle, _) = train_oracle(RatingScale::books(), &samples, &samples[..4], &cfg, &p).unwrap();
    assert_eq!(oracle.params(), a.params());
    assert_eq!(oracle.role(), ModelRole::Oracle);
    let unseen = oracle.predict_distribution(&p, &samples[0].history, &item("new", "Never Seen (2031)")).unwrap();
    assert!((unseen.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn training_errors() {
    let p = HashedProvider::default();
    let bad = TrainSample { history: history(&[("Heat (1995)", 4.0)]), target: item("t", "X"), level: 5 };
    assert!(matches!(
        train(RatingScale::books(), &[bad], &[], &TrainConfig::default(), &p),
        Err(CriticError::LabelOutOfRange { label: 5, levels: 5 })
    ));
    assert!(matches!(
        train(RatingScale::books(), &[], &[], &TrainConfig::default(), &p),
        Err(CriticError::EmptyTrainingSet)
    ));
    let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
    let ok = TrainSample { history: history(&[("Heat (1995)", 4.0)]), target: item("t", "X"), level: 1 };
    assert!(matches!(train(RatingScale::books(), std::slice::from_ref(&ok), &[], &cfg, &p), Err(CriticError::InvalidConfig(_))));
    let cfg = TrainConfig { learning_rate: 1e300, epochs: 3, ..TrainConfig::default() };
    let exploded = train(RatingScale::books(), &[ok.clone(), ok], &[], &cfg, &p);
    assert!(matches!(exploded, Err(CriticError::NonFiniteLoss { .. })), "{exploded:?}");
}

#[test]
fn micro_metrics_single_label() {
    let pairs: Vec<(usize, usize)> =
        (0..10).map(|i| if i < 7 { (i % 3, i % 3) } else { ((i + 1) % 3, i % 3) }).collect();
    let e = micro_metrics(&pairs, 3);
    assert_eq!(e.micro_accuracy, 0.7);
    assert_eq!(e.micro_recall, 0.7);
    assert_eq!(e.accuracy, 0.7);
    let all = micro_metrics(&[(0, 0), (2, 2)], 3);
    assert_eq!((all.micro_accuracy, all.micro_recall), (1.0, 1.0));
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = HashedProvider::default();
    let mut m = CriticModel::new(RatingScale::movies(), 256, 8, p.fingerprint(), 5);
    m.quantize_to_f32();
    let path = dir.path().join("m.bin");
    save_model(&m, &path).unwrap();
    let check = LoadCheck { expected_fingerprint: Some(p.fingerprint()), ..LoadCheck::default() };
    let back = load_model(&path, &check).unwrap();
    assert_eq!(back, m);
    let h = history(&[("Heat (1995)", 4.0)]);
    let t = item("x", "Alien (1979)");
    assert_eq!(
        back.predict_distribution(&p, &h, &t).unwrap(),
        m.predict_distribution(&p, &h, &t).unwrap()
    );
}

#[test]
fn load_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bin");
    std::fs::write(&path, b"NOTAMODEL-------").unwrap();
    assert!(matches!(load_model(&path, &LoadCheck::default()), Err(CriticError::BadMagic)));

    let p = HashedProvider::default();
    let m = CriticModel::new(RatingScale::books(), 256, 4, p.fingerprint(), 5);
    save_model(&m, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8] = 99;
    let v99 = dir.path().join("v99.bin");
    std::fs::write(&v99, &bytes).unwrap();
    assert!(matches!(
        load_model(&v99, &LoadCheck::default()),
        Err(CriticError::VersionMismatch { found: 99, .. })
    ));

    let remote = crate::embedder::RemoteProvider::new(crate::embedder::RemoteEmbeddingConfig {
        url: "http://127.0.0.1:9/embeddings".into(),
        model: "text-embedding-3-small".into(),
        dim: 1536,
        token_env: "RECRITIC_TEST_UNSET".into(),
        cache_path: None,
        retry: Default::default(),
    })
    .unwrap();
    let check = LoadCheck { expected_fingerprint: Some(remote.fingerprint()), allow_fingerprint_mismatch: false };
    assert!(matches!(load_model(&path, &check), Err(CriticError::FingerprintMismatch { .. })));
    let lenient = LoadCheck { allow_fingerprint_mismatch: true, ..check };
    let loaded = load_model(&path, &lenient).unwrap();
    assert!(matches!(
        loaded.predict_distribution(&remote, &history(&[("A", 1.0)]), &item("x", "B")),
        Err(CriticError::FingerprintMismatch { .. })
    ));

    let truncated = dir.path().join("t.bin");
    std::fs::write(&truncated, &std::fs::read(&path).unwrap()[..40]).unwrap();
    assert!(load_model(&truncated, &LoadCheck::default()).is_err());
}

#[test]
fn build_samples_uses_held_out_targets() {
    let catalog = crate::catalog::Catalog::new((0..30).map(|i| Item::from_title(format!("i{i:02}"), format!("T {i}"))));
    let items: Vec<_> = catalog.items().cloned().collect();
    let users = (0..3)
        .map(|u| {
            let n = 22 + u;
            UserHistory::new(
                format!("u{u}"),
                items[..n].iter().map(|it| Interaction { item: it.clone(), rating: 3.0 }).collect(),
            )
        })
        .chain(std::iter::once(UserHistory::new("short", vec![])))
        .collect();
    let d = Dataset::new("d", RatingScale::books(), catalog, users).unwrap();
    let (all, skipped) = build_samples(&d, 20, None, 1);
    assert_eq!(skipped, 1);
    assert_eq!(all.len(), 2 + 3 + 4);
    let (one, _) = build_samples(&d, 20, Some(1), 1);
    assert_eq!(one.len(), 3);
    assert!(one.iter().all(|s| s.level == 2 && s.history.len() == 20));
    assert!(one.iter().all(|s| s.history.rating_of(&s.target.id).is_none()));
}
