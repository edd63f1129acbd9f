mod common;

use std::sync::Arc;

use adaptorx_core::evaluation::{ConvergenceCriterion, Metric, Split};
use adaptorx_core::lang_module::LangModule;
use adaptorx_core::model::{ModelConfig, Transformer};
use adaptorx_core::objectives::{Objective, ObjectiveKind};
use adaptorx_core::schedules::{SamplingStrategy, Schedule, ScheduleView};
use adaptorx_core::tensor::{adam_step, AdamConfig, AdamState, Graph, ParamStore, Parameter, Tensor, IGNORE_INDEX};
use adaptorx_core::trainer::{train, StopReason, TrainingArguments, LOG_HEADER};
use adaptorx_core::Error;

fn small_lm(seed: u64) -> LangModule {
    let vocab = common::toy_vocab();
    LangModule::new(Transformer::new(common::small_config(vocab.len())).unwrap(), seed).unwrap()
}

fn seq2seq(id: &str, n: usize, seed: u64, bs: usize) -> Objective {
    Objective::new(
        id,
        ObjectiveKind::Seq2Seq,
        common::toy_vocab(),
        common::reverse_pairs(n, seed),
        common::reverse_pairs(16, seed + 100),
    )
    .unwrap()
    .with_batch_size(bs)
    .unwrap()
}

fn tagger(id: &str) -> Objective {
    Objective::new(
        id,
        ObjectiveKind::TokenClassification,
        common::toy_vocab(),
        common::tagging_pairs(24, 5),
        common::tagging_pairs(8, 6),
    )
    .unwrap()
    .with_batch_size(8)
    .unwrap()
}

fn args() -> TrainingArguments {
    TrainingArguments {
        eval_interval: 10,
        log_interval: 5,
        ..TrainingArguments::default()
    }
}

fn snapshot(lm: &LangModule, prefix: &str) -> Vec<Parameter> {
    lm.store().iter().filter(|p| p.name.starts_with(prefix)).cloned().collect()
}

fn same(a: &[Parameter], b: &[Parameter]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.name == y.name && x.tensor.bit_eq(&y.tensor))
}

#[test]
fn accumulating_identical_batches_matches_one_batch() {
    // Batch size equals the data size, so every batch holds the same rows.
    let run = |k: usize| {
        let mut lm = small_lm(1);
        let o = seq2seq("a", 12, 3, 12);
        lm.register_objective(&o).unwrap();
        let mut schedule = Schedule::sequential(vec![o], 1).unwrap();
        // Key biases have an exactly-zero true gradient; with the default
        // epsilon Adam would turn their rounding noise into full steps.
        let mut a = TrainingArguments {
            gradient_accumulation_steps: Some(k),
            max_global_updates: Some(3),
            ..args()
        };
        a.adam.epsilon = 1e-4;
        let out = train(&mut lm, &mut schedule, &a).unwrap();
        assert_eq!(out.updates, 3);
        assert_eq!(out.batches, 3 * k as u64);
        lm
    };
    let (one, three) = (run(1), run(3));
    for (a, b) in one.store().iter().zip(three.store().iter()) {
        for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert!((x - y).abs() < 1e-6, "{}: {x} vs {y}", a.name);
        }
    }
}

#[test]
fn scaled_backward_accumulates_to_the_mean() {
    let mut store = ParamStore::<f64>::from_params([Parameter::new(
        "p",
        Tensor::new(vec![2, 3], vec![0.3, -0.2, 0.5, 1.0, 0.1, -0.7]).unwrap(),
    )])
    .unwrap();
    let targets = [2, 0];
    let grad_of = |store: &mut ParamStore<f64>, scale: f64, times: usize| {
        store.zero_grads();
        for _ in 0..times {
            let mut g = Graph::new();
            let x = g.param(store, 0);
            let l = g.cross_entropy(x, &targets, IGNORE_INDEX).unwrap();
            let l = g.scale(l, scale).unwrap();
            g.backward(l, store).unwrap();
        }
        store.get(0).tensor.grad().unwrap().to_vec()
    };
    let once = grad_of(&mut store, 1.0, 1);
    let accumulated = grad_of(&mut store, 0.25, 4);
    for (a, b) in once.iter().zip(&accumulated) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn parallel_pairs_one_update_per_round() {
    let mut lm = small_lm(2);
    let (a, b) = (seq2seq("a", 20, 1, 4), seq2seq("b", 20, 2, 4));
    lm.register_objective(&a).unwrap();
    lm.register_objective(&b).unwrap();
    let mut schedule = Schedule::parallel(vec![a, b], 2).unwrap();
    schedule.set_all_max_steps(6);
    let out = train(&mut lm, &mut schedule, &args()).unwrap();
    assert_eq!(out.batches, 12);
    assert_eq!(out.updates, 6);
    assert_eq!(out.stop, StopReason::Schedule);
    let objectives = schedule.objectives();
    assert_eq!(objectives[0].state.steps_taken, 6);
    assert_eq!(objectives[1].state.steps_taken, 6);
}

#[test]
fn single_objective_updates_equal_batches() {
    let mut lm = small_lm(3);
    let a = seq2seq("a", 20, 1, 4);
    lm.register_objective(&a).unwrap();
    let mut schedule = Schedule::sequential(vec![a], 3).unwrap();
    schedule.set_all_max_steps(7);
    let out = train(&mut lm, &mut schedule, &args()).unwrap();
    assert_eq!((out.updates, out.batches), (7, 7));
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut lm = small_lm(4);
        let (a, b) = (seq2seq("a", 20, 1, 4), tagger("b"));
        lm.register_objective(&a).unwrap();
        lm.register_objective(&b).unwrap();
        let mut schedule = Schedule::parallel(vec![a, b], 4).unwrap();
        schedule.set_all_max_steps(12);
        let a = TrainingArguments {
            log_path: Some(dir.path().join(name)),
            seed: 4,
            ..args()
        };
        train(&mut lm, &mut schedule, &a).unwrap();
        (std::fs::read(dir.path().join(name)).unwrap(), lm)
    };
    let ((log1, lm1), (log2, lm2)) = (run("1.tsv"), run("2.tsv"));
    assert_eq!(log1, log2);
    let text = String::from_utf8(log1).unwrap();
    assert!(text.starts_with(LOG_HEADER));
    assert!(text.lines().any(|l| l.contains("\tb\tval\tval_loss\t")));
    assert!(same(&snapshot(&lm1, ""), &snapshot(&lm2, "")));
}

#[test]
fn each_evaluation_logs_every_evaluator() {
    let mut lm = small_lm(5);
    let a = seq2seq("a", 20, 1, 4)
        .with_evaluators(vec![
            adaptorx_core::evaluation::Evaluator::val(Metric::Bleu),
            adaptorx_core::evaluation::Evaluator { metric: Metric::ExactMatch, split: Split::Train },
        ])
        .unwrap();
    lm.register_objective(&a).unwrap();
    let mut schedule = Schedule::sequential(vec![a], 5).unwrap();
    schedule.set_all_max_steps(10);
    let out = train(&mut lm, &mut schedule, &args()).unwrap();
    let mut at_10: Vec<(String, String)> = out
        .log
        .iter()
        .filter(|r| r.update == 10 && r.metric != "loss")
        .map(|r| (r.split.clone(), r.metric.clone()))
        .collect();
    at_10.sort();
    assert_eq!(
        at_10,
        [("train", "exact_match"), ("val", "bleu"), ("val", "val_loss")]
            .map(|(s, m)| (s.to_string(), m.to_string()))
            .to_vec()
    );
}

#[test]
fn token_classification_leaves_other_heads_untouched() {
    let mut lm = small_lm(6);
    let (a, b) = (seq2seq("a", 20, 1, 4), tagger("b"));
    lm.register_objective(&a).unwrap();
    lm.register_objective(&b).unwrap();
    let head_a = snapshot(&lm, "head.a.");
    let head_b = snapshot(&lm, "head.b.");
    let body = snapshot(&lm, "body.");
    let mut schedule = Schedule::sequential(vec![b], 6).unwrap();
    schedule.set_all_max_steps(5);
    train(&mut lm, &mut schedule, &args()).unwrap();
    assert!(same(&head_a, &snapshot(&lm, "head.a.")));
    assert!(!same(&head_b, &snapshot(&lm, "head.b.")));
    assert!(!same(&body, &snapshot(&lm, "body.")));
}

#[test]
fn gradient_step_through_one_head_spares_the_other() {
    let mut lm = small_lm(7);
    let (mut a, b) = (seq2seq("a", 8, 1, 8), seq2seq("b", 8, 2, 8));
    lm.register_objective(&a).unwrap();
    lm.register_objective(&b).unwrap();
    let head_b = snapshot(&lm, "head.b.");
    let body = snapshot(&lm, "body.");

    lm.store_mut().zero_grads();
    let mut schedule = Schedule::sequential(vec![a.clone()], 7).unwrap();
    let batch = schedule.next_batch().unwrap().unwrap();
    let mut g = Graph::new();
    let logits = lm
        .model()
        .forward(&mut g, lm.params_for("a").unwrap(), lm.head_for("a").unwrap(), &batch, None)
        .unwrap();
    let loss = a.compute_loss(&mut g, logits, &batch).unwrap();
    g.backward(loss, lm.store_mut()).unwrap();
    adam_step(lm.store_mut(), &mut AdamState::new(AdamConfig::default())).unwrap();

    assert!(same(&head_b, &snapshot(&lm, "head.b.")));
    assert!(!same(&body, &snapshot(&lm, "body.")));
    // Both objectives see the one updated body.
    let ids = |id: &str| {
        let mut v: Vec<usize> = lm
            .bindings_for(id)
            .unwrap()
            .iter()
            .filter(|(n, _)| n.starts_with("body."))
            .map(|(_, &i)| i)
            .collect();
        v.sort();
        v
    };
    assert_eq!(ids("a"), ids("b"));
    assert!(matches!(lm.head_for("c"), Err(Error::Routing(_))));
}

/// Two batches of `b` for every batch of `a`; everything else default.
#[derive(Debug, Default)]
struct TwoToOne(usize);

impl SamplingStrategy for TwoToOne {
    fn sample_objectives(&mut self, _view: &ScheduleView<'_>) -> Option<usize> {
        self.0 += 1;
        Some(if self.0.is_multiple_of(3) { 0 } else { 1 })
    }
}

#[test]
fn custom_strategy_only_needs_sampling() {
    let mut lm = small_lm(8);
    let (a, b) = (seq2seq("a", 20, 1, 4), seq2seq("b", 20, 2, 4));
    lm.register_objective(&a).unwrap();
    lm.register_objective(&b).unwrap();
    let mut schedule = Schedule::new(vec![a, b], Box::new(TwoToOne::default()), 8, 8).unwrap();
    let out = train(&mut lm, &mut schedule, &args()).unwrap();
    // b b a b b a b b a b b: `b` reaches its cap of 8 on batch 11.
    assert_eq!(out.batches, 11);
    assert_eq!(schedule.objectives()[0].state.steps_taken, 3);
    assert_eq!(schedule.objectives()[1].state.steps_taken, 8);
    assert_eq!(schedule.strategy_name(), "custom");
}

#[test]
fn copy_task_train_loss_falls() {
    let vocab = common::toy_vocab();
    let mut lm = LangModule::new(Transformer::new(ModelConfig::new(vocab.len())).unwrap(), 9).unwrap();
    let o = Objective::new(
        "copy",
        ObjectiveKind::Seq2Seq,
        vocab,
        common::copy_pairs(64, 9),
        common::copy_pairs(16, 10),
    )
    .unwrap()
    .with_batch_size(16)
    .unwrap();
    lm.register_objective(&o).unwrap();
    let mut schedule = Schedule::sequential(vec![o], 9).unwrap();
    schedule.set_all_max_steps(500);
    let a = TrainingArguments {
        eval_interval: 100,
        log_interval: 50,
        ..TrainingArguments::default()
    };
    let out = train(&mut lm, &mut schedule, &a).unwrap();
    assert_eq!(out.updates, 500);
    let last = out.log.iter().rev().find(|r| r.metric == "loss").unwrap();
    assert_eq!(last.update, 500);
    assert!(last.value < 0.1, "train loss {}", last.value);
}

#[test]
fn compute_loss_is_plain_cross_entropy() {
    let vocab = Arc::new(adaptorx_core::data::Vocab::build([(0..66).map(|i| format!("x{i}")).collect::<Vec<_>>().join(" ")]));
    assert_eq!(vocab.len(), 70);
    let mut o = Objective::new(
        "o",
        ObjectiveKind::Seq2Seq,
        vocab.clone(),
        adaptorx_core::data::TextPairSource::new(vec!["x1 x2".into()], vec!["x3 x4 x5".into()]).unwrap(),
        Default::default(),
    )
    .unwrap();
    let ex = o.encode("x1 x2", "x3 x4 x5").unwrap();
    let batch = adaptorx_core::batch::Batch::collate("o", &[ex]).unwrap();
    let targets = batch.labels.flat().to_vec();
    let t = targets.len();

    let mut g = Graph::new();
    let uniform = g.constant(&Tensor::zeros(vec![1, t, 70]));
    let l = o.compute_loss(&mut g, uniform, &batch).unwrap();
    assert!((g.value(l)[0] as f64 - 70f64.ln()).abs() < 1e-3);

    let mut onehot = Tensor::zeros(vec![1, t, 70]);
    for (i, &k) in targets.iter().enumerate() {
        onehot.data_mut()[i * 70 + k] = 1e4;
    }
    let x = g.constant(&onehot);
    let l = o.compute_loss(&mut g, x, &batch).unwrap();
    assert!(g.value(l)[0] < 1e-3);

    let random = Tensor::new(vec![1, t, 70], (0..t * 70).map(|i| ((i * 7919) % 97) as f32 / 13.0).collect()).unwrap();
    let x = g.constant(&random);
    let via_objective = o.compute_loss(&mut g, x, &batch).unwrap();
    let direct = g.cross_entropy(x, &targets, IGNORE_INDEX).unwrap();
    assert_eq!(g.value(via_objective)[0].to_bits(), g.value(direct)[0].to_bits());
}

#[test]
fn evaluation_is_pure_and_overfit_val_loss_is_small() {
    let vocab = common::toy_vocab();
    let mut lm = LangModule::new(Transformer::new(ModelConfig::new(vocab.len())).unwrap(), 10).unwrap();
    let pair = adaptorx_core::data::TextPairSource::new(vec!["w1 w5 w2".into()], vec!["w2 w5 w1".into()]).unwrap();
    let o = Objective::new("o", ObjectiveKind::Seq2Seq, vocab, pair.clone(), pair)
        .unwrap()
        .with_batch_size(1)
        .unwrap();
    lm.register_objective(&o).unwrap();
    let mut schedule = Schedule::sequential(vec![o], 10).unwrap();
    schedule.set_all_max_steps(500);
    let a = TrainingArguments {
        eval_interval: 1000,
        ..TrainingArguments::default()
    };
    train(&mut lm, &mut schedule, &a).unwrap();
    let o = &mut schedule.objectives_mut()[0];
    let c = ConvergenceCriterion::default();
    let first = o.evaluate(Split::Val, &lm, &c).unwrap();
    let second = o.evaluate(Split::Val, &lm, &c).unwrap();
    assert_eq!(first, second);
    assert!(first[&Metric::ValLoss] < 0.01, "{first:?}");
}
