use std::sync::Mutex;

use super::*;
use crate::catalog::{sample_eval_instance, Interaction, RatingScale};
use crate::critic::{build_samples, train, TrainConfig};
use crate::embedder::HashedProvider;
use crate::llm::{Completion, MockBackend, MockConfig, PromptTemplates, LlmSettings};
use crate::synthetic::{generate, SyntheticConfig};

/// Replays fixed answers in order; `None` is a backend failure.
struct Scripted {
    answers: Vec<Option<String>>,
    next: Mutex<usize>,
}

impl Scripted {
    fn new(answers: &[Option<&str>]) -> Self {
        Self { answers: answers.iter().map(|a| a.map(String::from)).collect(), next: Mutex::new(0) }
    }
}

impl LlmBackend for Scripted {
    fn complete(&self, req: &ChatRequest) -> Completion {
        let mut i = self.next.lock().unwrap();
        let answer = self.answers[(*i).min(self.answers.len() - 1)].clone();
        *i += 1;
        let record = CallRecord {
            request_id: req.request_id.clone(),
            latency_ms: 5.0,
            prompt_tokens: None,
            completion_tokens: None,
            outcome: CallOutcome::Ok,
        };
        let result = answer.ok_or(crate::llm::LlmError::EmptyResponse);
        Completion { result, record }
    }
}

fn fixture() -> (Catalog, EvalInstance, CriticModel) {
    let items: Vec<Item> = (0..12).map(|i| Item::from_title(format!("m{i:02}"), format!("Movie {i} ({})", 1990 + i))).collect();
    let catalog = Catalog::new(items);
    let all: Vec<_> = catalog.items().cloned().collect();
    let history = UserHistory::new(
        "u1",
        all[..3].iter().map(|it| Interaction { item: it.clone(), rating: 4.0 }).collect(),
    );
    let inst = EvalInstance {
        user_id: "u1".into(),
        history,
        held_out: vec![Interaction { item: all[5].clone(), rating: 5.0 }],
        candidate_set: None,
    };
    let p = HashedProvider::default();
    let critic = CriticModel::new(RatingScale::movies(), p.dim(), 8, p.fingerprint(), 3);
    (catalog, inst, critic)
}

fn ten(offset: usize) -> String {
    (0..10).map(|i| format!("{}. Movie {} ({})", i + 1, i + offset, 1990 + i + offset)).collect::<Vec<_>>().join("\n")
}

fn run(backend: &dyn LlmBackend, loops: usize) -> LoopTrace {
    let (catalog, inst, critic) = fixture();
    let p = HashedProvider::default();
    let prompts = PromptBuilder::default();
    let ctx = LoopContext { critic: &critic, provider: &p, catalog: &catalog, backend, prompts: &prompts };
    run_loop(&ctx, &inst, &LoopConfig { loops, n: 10, candidate_mode: false }).unwrap().trace
}

#[test]
fn zero_loops_is_one_call() {
    let b = Scripted::new(&[Some(&ten(0))]);
    let t = run(&b, 0);
    assert_eq!((t.lists.len(), t.feedback.len(), t.calls.len()), (1, 0, 1));
    assert_eq!(t.final_list, t.lists[0]);
    assert_eq!(t.loops_executed, 0);
    assert!(!t.is_truncated());
}

#[test]
fn three_loops_trace_shape() {
    let b = Scripted::new(&[Some(&ten(0))]);
    let t = run(&b, 3);
    assert_eq!((t.lists.len(), t.feedback.len(), t.calls.len()), (4, 3, 4));
    assert_eq!(t.feedback.iter().map(|f| f.loop_index).collect::<Vec<_>>(), [0, 1, 2]);
    assert_eq!(t.lists[3].source, ListSource::Refined(3));
    assert_eq!(t.calls[2].request_id, "u1/loop2");
    assert_eq!(t.loops_executed, 3);
    assert_eq!(t.list_after(1), Some(&t.lists[1]));
}

#[test]
fn unresolved_titles_get_synthetic_scores() {
    let (catalog, inst, critic) = fixture();
    let p = HashedProvider::default();
    let list = RankedList::from_titles(
        ["Movie 4 (1994)", "Twin Peaks: Fire Walker Stunt Double (2015)"],
        ListSource::Initial,
    );
    let fb = score_recommendations(&critic, &p, &inst.history, &list, &catalog, 0);
    assert_eq!(fb.entries[0].item_id, Some(ItemId::from("m04")));
    assert!(!fb.entries[0].synthetic);
    let e = &fb.entries[1];
    assert!(e.synthetic && e.item_id.is_none());
    let s = e.score.as_ref().unwrap();
    assert_eq!(s.item_id, ItemId::from("synthetic:twin peaks fire walker stunt double"));
    assert_eq!(s.distribution.len(), 10);
}

#[test]
fn backend_failure_truncates() {
    let b = Scripted::new(&[Some(&ten(0)), None]);
    let t = run(&b, 2);
    assert_eq!(t.lists.len(), 1);
    assert_eq!(t.feedback.len(), 1);
    assert_eq!(t.calls.len(), 2);
    assert_eq!(t.calls[1].outcome, CallOutcome::Error);
    assert!(t.error.as_ref().unwrap().backend);
    assert!(t.is_truncated());
    assert_eq!(t.final_list, t.lists[0]);

    let b = Scripted::new(&[None]);
    let t = run(&b, 1);
    assert!(t.lists.is_empty() && t.final_list.is_empty());
    assert_eq!(t.error.as_ref().unwrap().loop_index, 0);
    assert_eq!(t.list_after(0), None);
}

#[test]
fn short_refinement_carries_previous_list() {
    let b = Scripted::new(&[Some(&ten(0)), Some("1. Movie 9 (1999)\n2. Movie 8 (1998)")]);
    let t = run(&b, 2);
    assert!(t.carried_forward);
    assert_eq!(t.degraded_loops, [1]);
    assert_eq!(t.calls[1].outcome, CallOutcome::ParseDegraded);
    assert_eq!(t.final_list, t.lists[0]);
    assert_eq!(t.lists.len(), 2);
    assert_eq!(t.list_after(1), Some(&t.lists[0]));
}

#[test]
fn missing_candidates_and_empty_history() {
    let (catalog, mut inst, critic) = fixture();
    let p = HashedProvider::default();
    let prompts = PromptBuilder::default();
    let b = Scripted::new(&[Some(&ten(0))]);
    let ctx = LoopContext { critic: &critic, provider: &p, catalog: &catalog, backend: &b, prompts: &prompts };
    let cfg = LoopConfig { candidate_mode: true, ..LoopConfig::default() };
    assert!(matches!(run_loop(&ctx, &inst, &cfg), Err(LoopError::MissingCandidates(_))));
    inst.history.interactions.clear();
    assert!(matches!(run_loop(&ctx, &inst, &LoopConfig::default()), Err(LoopError::EmptyHistory(_))));
}

#[test]
fn predict_many_matches_single_predictions() {
    let (catalog, inst, critic) = fixture();
    let p = HashedProvider::default();
    let items: Vec<_> = catalog.items().cloned().collect();
    let refs: Vec<&Item> = items.iter().map(|i| i.as_ref()).collect();
    let many = critic.predict_many(&p, &inst.history, &refs).unwrap();
    for (it, s) in items.iter().zip(many) {
        assert_eq!(s.unwrap(), critic.predict_rating(&p, &inst.history, it).unwrap());
    }
}

#[test]
fn mock_refinement_does_not_lower_mean_estimate() {
    let data = generate(&SyntheticConfig { users_per_cluster: 60, ..SyntheticConfig::default() });
    let p = HashedProvider::default();
    let (samples, _) = build_samples(&data, 20, None, 1);
    let cfg = TrainConfig { hidden: 32, epochs: 40, learning_rate: 3e-3, patience: 15, ..TrainConfig::default() };
    let (critic, _) = train(data.scale, &samples, &samples[..100], &cfg, &p).unwrap();
    let mock = MockBackend::from_dataset(&data, MockConfig::default());
    let prompts = PromptBuilder::new(PromptTemplates::default(), LlmSettings::default());
    let ctx = LoopContext { critic: &critic, provider: &p, catalog: &data.catalog, backend: &mock, prompts: &prompts };
    let instances: Vec<_> = data.users[..20].iter().map(|u| sample_eval_instance(u, 20, 5).unwrap()).collect();
    let runs = run_users(&ctx, &instances, &LoopConfig::default());
    for (inst, r) in instances.iter().zip(runs) {
        let t = r.unwrap().trace;
        let before = t.feedback[0].mean_estimate().unwrap();
        let after = score_recommendations(&critic, &p, &inst.history, &t.final_list, &data.catalog, 1)
            .mean_estimate()
            .unwrap();
        assert!(after >= before, "{}: {before} -> {after}", t.user_id);
    }
}
