mod common;

use nsp_bert::corpus::{generate_corpus, CorpusConfig};
use nsp_bert::harness::{
    evaluate, make_synthetic_task, mean_std, predict, run_experiment, summary_csv, EvalMode,
    ExperimentConfig, Method, SyntheticConfig, SyntheticKind, TASK_ID_BASE,
};
use nsp_bert::pretrain::corpus_vocab;
use nsp_bert::scoring::LabelDistribution;
use nsp_bert::tuning::{TuningConfig, Variant};
use nsp_bert::{EncoderModel, Vocab};

fn setup() -> (CorpusConfig, Vocab, EncoderModel) {
    let corpus = CorpusConfig::default();
    let vocab = corpus_vocab(&generate_corpus(&corpus).unwrap()).unwrap();
    let model = EncoderModel::new(common::micro_config(vocab.len()), 6).unwrap();
    (corpus, vocab, model)
}

fn small(kind: SyntheticKind) -> SyntheticConfig {
    SyntheticConfig {
        kind,
        pool_documents: 40,
        test_documents: 4,
        ..Default::default()
    }
}

#[test]
fn tasks_are_deterministic_and_separate_from_pretraining() {
    let corpus = CorpusConfig::default();
    for kind in [SyntheticKind::Topic, SyntheticKind::Pair] {
        let a = make_synthetic_task(&corpus, &small(kind), 2).unwrap();
        assert_eq!(a, make_synthetic_task(&corpus, &small(kind), 2).unwrap());
        assert!(a.document_ids.start >= TASK_ID_BASE);
        assert!(a.document_ids.start >= corpus.documents as u64);
        let b = make_synthetic_task(&corpus, &small(kind), 3).unwrap();
        assert!(a.document_ids.end <= b.document_ids.start);
        let pool: std::collections::HashSet<_> = a.pool.iter().map(|e| &e.id).collect();
        assert!(a.test.iter().all(|e| !pool.contains(&e.id)));
        a.task.validate().unwrap();
        for ex in a.pool.iter().chain(&a.test) {
            ex.validate(&a.task).unwrap();
        }
    }
}

#[test]
fn pair_task_is_balanced() {
    let t = make_synthetic_task(&CorpusConfig::default(), &small(SyntheticKind::Pair), 0).unwrap();
    let entail = t.pool.iter().filter(|e| e.label == "Entail").count();
    assert_eq!(2 * entail, t.pool.len());
}

#[test]
fn modes_must_fit_the_task() {
    let (corpus, vocab, model) = setup();
    let topic = make_synthetic_task(&corpus, &small(SyntheticKind::Topic), 0).unwrap();
    let pair = make_synthetic_task(&corpus, &small(SyntheticKind::Pair), 0).unwrap();
    let d = LabelDistribution::uniform(&pair.task.labels()).unwrap();
    assert!(predict(
        &model,
        &vocab,
        &pair.test,
        &pair.task,
        EvalMode::ZeroShotNsp
    )
    .is_err());
    assert!(predict(
        &model,
        &vocab,
        &topic.test,
        &topic.task,
        EvalMode::SamplesContrast(&d)
    )
    .is_err());
    assert!(predict(
        &model,
        &vocab,
        &pair.test,
        &pair.task,
        EvalMode::ZeroShotPet
    )
    .is_err());

    let n = pair.test.len();
    for mode in [
        EvalMode::SamplesContrast(&d),
        EvalMode::Thresholds {
            dev: &pair.pool[..40],
        },
    ] {
        let pred = predict(&model, &vocab, &pair.test, &pair.task, mode).unwrap();
        assert_eq!(pred.len(), n);
        assert!(pred.iter().all(|&p| p < 2));
    }
    // With a uniform distribution over the full set both labels get half.
    let pred = predict(
        &model,
        &vocab,
        &pair.test,
        &pair.task,
        EvalMode::SamplesContrast(&d),
    )
    .unwrap();
    assert_eq!(pred.iter().filter(|&&p| p == 0).count(), n / 2);

    for mode in [EvalMode::ZeroShotNsp, EvalMode::ZeroShotPet] {
        let acc = evaluate(&model, &vocab, &topic.test, &topic.task, mode).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
    assert!(evaluate(&model, &vocab, &[], &topic.task, EvalMode::ZeroShotNsp).is_err());
}

#[test]
fn experiments_report_every_seed_reproducibly() {
    let (corpus, vocab, model) = setup();
    let task = make_synthetic_task(&corpus, &small(SyntheticKind::Topic), 0).unwrap();
    let cfg = ExperimentConfig {
        method: Method::NspTune(Variant::CoupledBce),
        k: 2,
        seeds: vec![1, 2, 3, 4, 5],
        tuning: TuningConfig {
            epochs: 1,
            lr: 1e-3,
            batch_size: 4,
            ..Default::default()
        },
    };
    let a = run_experiment(&model, &vocab, &task.pool, &task.test, &task.task, &cfg).unwrap();
    let b = run_experiment(&model, &vocab, &task.pool, &task.test, &task.task, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.seeds.len(), 5);
    assert_eq!(a.rows.len(), 5 * 2);
    let accs = a.test_accuracies();
    assert_eq!(mean_std(&accs), (a.mean, a.std));

    let zero = run_experiment(
        &model,
        &vocab,
        &task.pool,
        &task.test,
        &task.task,
        &ExperimentConfig {
            method: Method::ZeroShot,
            ..cfg.clone()
        },
    )
    .unwrap();
    // Zero-shot ignores the split, so every seed scores the same.
    assert_eq!(zero.std, 0.0);
    assert_eq!(zero.checkpoint_fingerprint, a.checkpoint_fingerprint);
    assert_ne!(zero.config_fingerprint, a.config_fingerprint);
    let splits = |r: &nsp_bert::harness::ExperimentReport| -> Vec<String> {
        r.seeds
            .iter()
            .map(|s| s.split_fingerprint.clone())
            .collect()
    };
    assert_eq!(splits(&zero), splits(&a));

    let csv = summary_csv(&[zero, a]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,runs,test_mean,test_std,dev_mean,dev_std");
    assert!(lines[1].starts_with("zero_shot,5,"));
    assert!(lines[2].starts_with("coupled_bce,5,"));
}

#[test]
fn failing_seeds_are_named() {
    let (corpus, vocab, model) = setup();
    let task = make_synthetic_task(&corpus, &small(SyntheticKind::Topic), 0).unwrap();
    let cfg = ExperimentConfig {
        k: 1000,
        seeds: vec![7],
        ..Default::default()
    };
    let err = run_experiment(&model, &vocab, &task.pool, &task.test, &task.task, &cfg).unwrap_err();
    assert!(err.to_string().starts_with("seed 7:"), "{err}");
}

#[test]
fn mean_std_is_population() {
    assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
    assert_eq!(mean_std(&[0.5; 5]).1, 0.0);
}
