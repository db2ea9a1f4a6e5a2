mod common;

use nsp_bert::corpus::{generate_corpus, CorpusConfig};
use nsp_bert::data::{kshot_split, Example, KShotSplit};
use nsp_bert::harness::{make_synthetic_task, SyntheticConfig, SyntheticKind, SyntheticTask};
use nsp_bert::pretrain::corpus_vocab;
use nsp_bert::tuning::{
    build_instances, fine_tune_baseline, nsp_head_checksum, nsp_tune, results_csv, EvalSets, Head,
    Objective, ResultRow, Tuned, TuningConfig, Variant,
};
use nsp_bert::{EncoderModel, Vocab};
use rand::Rng;

struct Fixture {
    vocab: Vocab,
    model: EncoderModel,
    task: SyntheticTask,
    split: KShotSplit,
}

fn fixture() -> Fixture {
    let corpus = CorpusConfig::default();
    let vocab = corpus_vocab(&generate_corpus(&corpus).unwrap()).unwrap();
    let model = EncoderModel::new(common::micro_config(vocab.len()), 4).unwrap();
    let cfg = SyntheticConfig {
        pool_documents: 40,
        test_documents: 4,
        ..Default::default()
    };
    let task = make_synthetic_task(&corpus, &cfg, 3).unwrap();
    let split = kshot_split(&task.pool, &task.task.labels(), 2, 7).unwrap();
    Fixture {
        vocab,
        model,
        task,
        split,
    }
}

fn sets(f: &Fixture) -> EvalSets<'_> {
    EvalSets {
        dev: &f.split.dev,
        test: Some(&f.task.test),
    }
}

fn tuning(variant: Variant, epochs: usize) -> TuningConfig {
    TuningConfig {
        epochs,
        lr: 1e-3,
        batch_size: 2,
        variant,
        seed: 5,
    }
}

#[test]
fn group_softmax_gradients_match_finite_differences() {
    let check = common::encoder_gradcheck(
        "encoder_group_softmax",
        43,
        |rng, n| Objective::GroupSoftmax {
            labels: 3,
            gold: (0..n / 3).map(|_| rng.random_range(0..3)).collect(),
        },
        6,
        false,
    );
    assert!(check.passed(), "{} worst {:.3e}", check.name, check.worst);
}

#[test]
fn linear_head_gradients_match_finite_differences() {
    let check = common::encoder_gradcheck(
        "encoder_head_ce",
        47,
        |rng, n| Objective::HeadCe((0..n).map(|_| rng.random_range(0..3)).collect()),
        3,
        true,
    );
    assert!(check.passed(), "{} worst {:.3e}", check.name, check.worst);
}

#[test]
fn decoupled_bce_gradients_match_finite_differences() {
    let check = common::encoder_gradcheck(
        "encoder_decoupled_bce",
        53,
        |rng, n| Objective::Bce((0..n).map(|_| rng.random_range(0..2) as f32).collect()),
        3,
        false,
    );
    assert!(check.passed(), "{} worst {:.3e}", check.name, check.worst);
}

#[test]
fn one_positive_instance_per_sample() {
    let f = fixture();
    let labels = f.task.task.labels().len();
    for ex in &f.split.train {
        let inst = build_instances(&f.vocab, ex, &f.task.task).unwrap();
        assert_eq!(inst.len(), labels);
        assert_eq!(inst.iter().filter(|i| i.target == 1.0).count(), 1);
        assert!(inst.iter().all(|i| i.parent == ex.id));
        let gold = f.task.task.verbalizer.index_of(&ex.label).unwrap();
        assert_eq!(inst[gold].target, 1.0);
        assert_eq!(
            inst.iter().map(|i| i.candidate).collect::<Vec<_>>(),
            (0..labels).collect::<Vec<_>>()
        );
    }
}

#[test]
fn pair_tasks_have_no_coupled_instances() {
    let f = fixture();
    let pair = make_synthetic_task(
        &CorpusConfig::default(),
        &SyntheticConfig {
            kind: SyntheticKind::Pair,
            pool_documents: 10,
            test_documents: 2,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    assert!(build_instances(&f.vocab, &pair.pool[0], &pair.task).is_err());
    let train = &pair.pool[..4];
    let dev = &pair.pool[4..8];
    let sets = EvalSets { dev, test: None };
    assert!(nsp_tune(
        &f.model,
        &f.vocab,
        &pair.task,
        train,
        sets,
        &tuning(Variant::CoupledBce, 1)
    )
    .is_err());
    // The fine-tuning baseline handles pairs through its plain input.
    fine_tune_baseline(
        &f.model,
        &f.vocab,
        &pair.task,
        train,
        sets,
        &tuning(Variant::CoupledBce, 1),
    )
    .unwrap();
}

#[test]
fn zero_epochs_is_zero_shot() {
    let f = fixture();
    let out = nsp_tune(
        &f.model,
        &f.vocab,
        &f.task.task,
        &f.split.train,
        sets(&f),
        &tuning(Variant::CoupledBce, 0),
    )
    .unwrap();
    assert_eq!(out.history.len(), 1);
    assert_eq!(out.best_epoch, 0);
    assert_eq!(out.tuned, Tuned::zero_shot(f.model.clone()));
    let direct = Tuned::zero_shot(f.model.clone())
        .accuracy(&f.vocab, &f.task.test, &f.task.task)
        .unwrap();
    assert_eq!(out.best().test_acc, Some(direct));
}

#[test]
fn heads_per_variant() {
    let f = fixture();
    let original = nsp_head_checksum(&f.model);
    for variant in Variant::ALL {
        let out = nsp_tune(
            &f.model,
            &f.vocab,
            &f.task.task,
            &f.split.train,
            sets(&f),
            &tuning(variant, 0),
        )
        .unwrap();
        let reused = nsp_head_checksum(&out.tuned.model) == original;
        assert_eq!(reused, variant != Variant::ReinitSigmoidHead, "{variant}");
        assert_eq!(
            matches!(out.tuned.head, Head::TemplatedLinear(_)),
            variant == Variant::LinearHeadSoftmax,
            "{variant}"
        );
    }
}

#[test]
fn tuning_is_deterministic_and_records_every_epoch() {
    let f = fixture();
    for variant in Variant::ALL {
        let cfg = tuning(variant, 2);
        let a = nsp_tune(
            &f.model,
            &f.vocab,
            &f.task.task,
            &f.split.train,
            sets(&f),
            &cfg,
        )
        .unwrap();
        let b = nsp_tune(
            &f.model,
            &f.vocab,
            &f.task.task,
            &f.split.train,
            sets(&f),
            &cfg,
        )
        .unwrap();
        assert_eq!(a.history, b.history, "{variant}");
        assert_eq!(a.tuned, b.tuned, "{variant}");
        assert_eq!(
            a.history.iter().map(|r| r.epoch).collect::<Vec<_>>(),
            [0, 1, 2]
        );
        assert!(
            a.history[1..]
                .iter()
                .all(|r| r.loss.is_finite() && r.loss > 0.0),
            "{variant}"
        );
        assert!((1..=2).contains(&a.best_epoch));
        let best = a.best();
        assert!(a.history[1..].iter().all(|r| r.dev_acc <= best.dev_acc));
    }
}

#[test]
fn training_changes_the_encoder_and_reduces_loss() {
    let f = fixture();
    let cfg = TuningConfig {
        lr: 3e-3,
        ..tuning(Variant::CoupledBce, 6)
    };
    let out = nsp_tune(
        &f.model,
        &f.vocab,
        &f.task.task,
        &f.split.train,
        sets(&f),
        &cfg,
    )
    .unwrap();
    let losses: Vec<f64> = out.history[1..].iter().map(|r| r.loss).collect();
    assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
    let last = out.history.last().unwrap();
    assert!(last.epoch == 6 && out.tuned.model != f.model);
}

#[test]
fn fine_tune_uses_a_plain_head() {
    let f = fixture();
    let out = fine_tune_baseline(
        &f.model,
        &f.vocab,
        &f.task.task,
        &f.split.train,
        sets(&f),
        &tuning(Variant::CoupledBce, 1),
    )
    .unwrap();
    match &out.tuned.head {
        Head::PlainLinear(h) => assert_eq!(h.classes(), f.task.task.labels().len()),
        other => panic!("unexpected head {other:?}"),
    }
    let pred = out
        .tuned
        .predict(&f.vocab, &f.task.test, &f.task.task)
        .unwrap();
    assert_eq!(pred.len(), f.task.test.len());
}

#[test]
fn invalid_configs_and_inputs_are_rejected() {
    let f = fixture();
    let bad = TuningConfig {
        batch_size: 0,
        ..tuning(Variant::CoupledBce, 1)
    };
    assert!(nsp_tune(
        &f.model,
        &f.vocab,
        &f.task.task,
        &f.split.train,
        sets(&f),
        &bad
    )
    .is_err());
    let bad = TuningConfig {
        lr: f32::NAN,
        ..tuning(Variant::CoupledBce, 1)
    };
    assert!(bad.validate().is_err());
    let none: Vec<Example> = Vec::new();
    assert!(nsp_tune(
        &f.model,
        &f.vocab,
        &f.task.task,
        &none,
        sets(&f),
        &tuning(Variant::CoupledBce, 1)
    )
    .is_err());
    let mut unknown = f.split.train.clone();
    unknown[0].label = "nope".into();
    assert!(nsp_tune(
        &f.model,
        &f.vocab,
        &f.task.task,
        &unknown,
        sets(&f),
        &tuning(Variant::CoupledBce, 1)
    )
    .is_err());
}

#[test]
fn diverging_training_is_reported() {
    let f = fixture();
    let cfg = TuningConfig {
        lr: 1e30,
        ..tuning(Variant::CoupledBce, 3)
    };
    match nsp_tune(
        &f.model,
        &f.vocab,
        &f.task.task,
        &f.split.train,
        sets(&f),
        &cfg,
    ) {
        Err(e) => assert!(e.is_divergence(), "{e}"),
        // Adam bounds the step size, so a huge rate need not overflow.
        Ok(out) => assert!(out.history.iter().all(|r| r.dev_acc.is_finite())),
    }
}

#[test]
fn non_finite_weights_diverge() {
    let f = fixture();
    let mut model = f.model.clone();
    let i = model.param_index("pooler.weight").unwrap();
    model.params_mut()[i].data_mut()[0] = f32::NAN;
    for variant in [Variant::CoupledBce, Variant::DecoupledBce] {
        let err = nsp_tune(
            &model,
            &f.vocab,
            &f.task.task,
            &f.split.train,
            sets(&f),
            &tuning(variant, 1),
        )
        .unwrap_err();
        assert!(
            matches!(err, nsp_bert::Error::Divergence { step: 0, .. }),
            "{err}"
        );
    }
}

#[test]
fn variant_names_roundtrip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(v.to_string(), v.name());
    }
    assert!("softmax".parse::<Variant>().is_err());
    assert!(!Variant::DecoupledBce.coupled());
}

#[test]
fn results_csv_layout() {
    let f = fixture();
    let out = nsp_tune(
        &f.model,
        &f.vocab,
        &f.task.task,
        &f.split.train,
        sets(&f),
        &tuning(Variant::CoupledBce, 1),
    )
    .unwrap();
    let rows = ResultRow::from_history("coupled_bce", 5, &out.history);
    let csv = results_csv(&rows);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,seed,epoch,dev_acc,test_acc");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("coupled_bce,5,0,"));
}
