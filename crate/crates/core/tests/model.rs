mod common;

use nsp_bert::checkpoint::{vocab_path, Checkpoint, MAGIC};
use nsp_bert::corpus::Lexicon;
use nsp_bert::corpus::{
    generate_corpus, generate_documents, read_jsonl, sample_nsp_pairs, write_jsonl, CorpusConfig,
    NspLabel,
};
use nsp_bert::model::{EncoderConfig, EncoderModel, Preset};
use nsp_bert::pretrain::{
    corpus_vocab, mask_tokens, pretrain, smoothed_losses, EncodedCorpus, PretrainConfig,
};
use nsp_bert::tokenizer::{EncodedPair, MASK_ID, SPECIALS};
use nsp_bert::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> EncoderModel {
    EncoderModel::new(common::micro_config(24), 9).unwrap()
}

fn small_corpus() -> CorpusConfig {
    CorpusConfig {
        documents: 40,
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn masking_touches_only_content_tokens(ids in prop::collection::vec(0usize..40, 0..64), rate in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = mask_tokens(&ids, rate, 40, &mut rng);
        prop_assert_eq!(m.ids.len(), ids.len());
        prop_assert_eq!(m.positions.len(), m.targets.len());
        prop_assert!(m.positions.windows(2).all(|w| w[0] < w[1]));
        for (i, (&a, &b)) in ids.iter().zip(&m.ids).enumerate() {
            if m.positions.contains(&i) {
                prop_assert!(a >= SPECIALS.len());
                prop_assert!(b == MASK_ID || b >= SPECIALS.len());
            } else {
                prop_assert_eq!(a, b);
            }
        }
        for (&p, &t) in m.positions.iter().zip(&m.targets) {
            prop_assert_eq!(ids[p], t);
        }
    }

    #[test]
    fn padding_does_not_change_outputs(seed in 0u64..50) {
        let model = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = common::random_pair(&mut rng, 24, 16);
        let used: Vec<usize> = p.ids[..p.used_len()].to_vec();
        let sep = used.iter().position(|&i| i == nsp_bert::tokenizer::SEP_ID).unwrap();
        let wide = EncodedPair::from_ids(&used[1..sep], &used[sep + 1..used.len() - 1], 40).unwrap();
        let a = model.nsp_probs(std::slice::from_ref(&p)).unwrap()[0];
        let b = model.nsp_probs(&[wide]).unwrap()[0];
        prop_assert!((a[0] - b[0]).abs() < 1e-6);
    }
}

#[test]
fn batched_and_single_forward_agree() {
    let model = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pairs: Vec<EncodedPair> = (0..7)
        .map(|_| common::random_pair(&mut rng, 24, 16))
        .collect();
    let batched = model.nsp_probs(&pairs).unwrap();
    for (p, q) in pairs.iter().zip(&batched) {
        let single = model.nsp_prob_isnext(p).unwrap();
        assert!((single - q[0]).abs() < 1e-6);
    }
}

#[test]
fn presets_validate() {
    for preset in [
        Preset::Micro,
        Preset::Tiny,
        Preset::Small,
        Preset::Base,
        Preset::Large,
    ] {
        let cfg = EncoderConfig::preset(preset, 100);
        cfg.validate().unwrap();
        assert_eq!(cfg.hidden % cfg.heads, 0);
    }
    let bad = EncoderConfig {
        heads: 5,
        ..EncoderConfig::preset(Preset::Micro, 100)
    };
    assert!(EncoderModel::new(bad, 0).is_err());
}

#[test]
fn sequences_longer_than_positions_are_rejected() {
    let cfg = EncoderConfig {
        max_position: 16,
        ..common::micro_config(24)
    };
    let model = EncoderModel::new(cfg, 0).unwrap();
    let p = EncodedPair::from_ids(&[7; 30], &[8; 3], 40).unwrap();
    assert!(model.nsp_probs(&[p]).is_err());
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ck = Checkpoint::new(tiny(), 17, 3);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
    Checkpoint::load_expecting(&path, ck.model.config()).unwrap();
    let other = common::micro_config(30);
    assert!(matches!(
        Checkpoint::load_expecting(&path, &other),
        Err(Error::Shape { .. })
    ));
    assert_eq!(vocab_path(&path), dir.path().join("m.ckpt.vocab"));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = Checkpoint::new(tiny(), 0, 0).to_bytes().unwrap();
    assert!(bytes.starts_with(MAGIC));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
        Err(Error::Truncated { .. })
    ));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..5]),
        Err(Error::Truncated { .. })
    ));
    let mut wrong = bytes.clone();
    wrong[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&wrong),
        Err(Error::Format(_))
    ));
    let mut version = bytes.clone();
    version[7] = b'9';
    assert!(matches!(
        Checkpoint::from_bytes(&version),
        Err(Error::Version { .. })
    ));
    let mut header = bytes;
    header[12] = b'#';
    assert!(matches!(
        Checkpoint::from_bytes(&header),
        Err(Error::Format(_))
    ));
}

#[test]
fn corpus_is_deterministic_and_roundtrips() {
    let cfg = small_corpus();
    let a = generate_corpus(&cfg).unwrap();
    assert_eq!(a, generate_corpus(&cfg).unwrap());
    assert_eq!(a.len(), 40);
    assert!(a
        .iter()
        .all(|d| d.sentences.len() == cfg.sentences_per_document));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.jsonl");
    write_jsonl(&path, &a).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), a);
    let reseeded = CorpusConfig { seed: 8, ..cfg };
    assert_ne!(generate_corpus(&reseeded).unwrap(), a);
}

#[test]
fn nsp_pairs_are_balanced_and_well_formed() {
    let docs = generate_corpus(&small_corpus()).unwrap();
    let pairs = sample_nsp_pairs(&docs, 4000, 1).unwrap();
    let next = pairs.iter().filter(|p| p.label == NspLabel::IsNext).count();
    assert!((1800..2200).contains(&next), "{next}");
    for p in &pairs {
        match p.label {
            NspLabel::IsNext => assert_eq!((p.a.0, p.a.1 + 1), p.b),
            NspLabel::NotNext => assert_ne!(p.a.0, p.b.0),
        }
    }
    assert!(sample_nsp_pairs(&docs[..1], 3, 0).is_err());
}

#[test]
fn invalid_corpus_configs_are_rejected() {
    for cfg in [
        CorpusConfig {
            topics: 0,
            ..Default::default()
        },
        CorpusConfig {
            min_sentence_len: 9,
            max_sentence_len: 3,
            ..Default::default()
        },
        CorpusConfig {
            concentration: 1.5,
            ..Default::default()
        },
    ] {
        assert!(generate_documents(&cfg, 0..2).is_err());
    }
}

#[test]
fn short_pretraining_is_deterministic_and_learns() {
    let docs = generate_corpus(&small_corpus()).unwrap();
    let vocab = corpus_vocab(&docs).unwrap();
    let cfg = PretrainConfig {
        steps: 60,
        batch_size: 8,
        ..Default::default()
    };
    let run = || {
        let mut model = EncoderModel::new(common::micro_config(vocab.len()), 2).unwrap();
        let trace = pretrain(&mut model, &vocab, &docs, &cfg, |_| {}).unwrap();
        (model, trace)
    };
    let (a, ta) = run();
    let (b, tb) = run();
    let uniform = (vocab.len() as f64).ln();
    let held_out = heldout_mlm_loss(&a, &vocab, &small_corpus());
    assert!(
        held_out < uniform,
        "held-out MLM loss {held_out} vs uniform {uniform}"
    );
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    let smooth = smoothed_losses(&ta, 20);
    assert_eq!(smooth.len(), 3);
    assert!(smooth[2] < smooth[0], "{smooth:?}");
    assert!(ta.iter().all(|s| s.total.is_finite() && s.nsp > 0.0));

    let mut poisoned = EncoderModel::new(common::micro_config(vocab.len()), 2).unwrap();
    poisoned.params_mut()[0].data_mut().fill(f32::INFINITY);
    let err = pretrain(&mut poisoned, &vocab, &docs, &cfg, |_| {}).unwrap_err();
    assert!(err.is_divergence(), "{err}");

    let wrong_vocab = EncoderModel::new(common::micro_config(vocab.len() + 1), 2).unwrap();
    let mut m = wrong_vocab;
    assert!(pretrain(&mut m, &vocab, &docs, &cfg, |_| {}).is_err());
}

/// Mean held-out MLM cross-entropy on documents after the training range.
fn heldout_mlm_loss(model: &EncoderModel, vocab: &nsp_bert::Vocab, cfg: &CorpusConfig) -> f64 {
    let first = cfg.documents as u64;
    let docs = generate_documents(cfg, first..first + 20).unwrap();
    let enc = EncodedCorpus::new(vocab, &docs);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut total, mut count) = (0.0, 0usize);
    for p in sample_nsp_pairs(&docs, 100, 3).unwrap() {
        let mut pair = enc.pair(&p, 32).unwrap();
        let m = mask_tokens(&pair.ids, 0.15, vocab.len(), &mut rng);
        if m.positions.is_empty() {
            continue;
        }
        pair.ids = m.ids;
        pair.mask_positions = m.positions;
        for (dist, &t) in model
            .mlm_distributions(&pair)
            .unwrap()
            .iter()
            .zip(&m.targets)
        {
            total -= (dist[t] as f64).ln();
            count += 1;
        }
    }
    total / count as f64
}

/// P(lo <= X <= hi) for X ~ Binomial(n, 1/2), summed in log space.
fn binomial_half_band(n: u64, lo: u64, hi: u64) -> f64 {
    let ln_choose = |k: u64| {
        libm::lgamma(n as f64 + 1.0)
            - libm::lgamma(k as f64 + 1.0)
            - libm::lgamma((n - k) as f64 + 1.0)
    };
    (lo..=hi)
        .map(|k| (ln_choose(k) - n as f64 * std::f64::consts::LN_2).exp())
        .sum()
}

#[test]
fn nsp_label_balance_stays_in_the_binomial_band() {
    let p = binomial_half_band(1000, 450, 550);
    assert!((p - 0.99860).abs() < 5e-5, "{p}");
    let docs = generate_corpus(&small_corpus()).unwrap();
    for seed in 0..20 {
        let pairs = sample_nsp_pairs(&docs, 1000, seed).unwrap();
        let next = pairs.iter().filter(|p| p.label == NspLabel::IsNext).count();
        assert!((450..=550).contains(&next), "seed {seed}: {next}");
        assert_eq!(pairs, sample_nsp_pairs(&docs, 1000, seed).unwrap());
    }
}

#[test]
fn masking_rate_and_recipe() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ids: Vec<usize> = (0..100_000).map(|i| SPECIALS.len() + i % 50).collect();
    let m = mask_tokens(&ids, 0.15, 60, &mut rng);
    let frac = m.positions.len() as f64 / ids.len() as f64;
    assert!((0.145..=0.155).contains(&frac), "{frac}");
    let masked = m.positions.iter().filter(|&&p| m.ids[p] == MASK_ID).count() as f64
        / m.positions.len() as f64;
    assert!((0.78..=0.82).contains(&masked), "{masked}");
    let kept = m.positions.iter().filter(|&&p| m.ids[p] == ids[p]).count() as f64
        / m.positions.len() as f64;
    // Unchanged tokens plus random draws that hit the original token.
    assert!((0.08..=0.12).contains(&kept), "{kept}");

    let none = mask_tokens(&ids[..100], 0.0, 60, &mut rng);
    assert_eq!(none.ids, &ids[..100]);
    assert!(none.positions.is_empty());
}

#[test]
fn concentration_extremes_pick_one_lexicon() {
    for (concentration, topical) in [(1.0, true), (0.0, false)] {
        let cfg = CorpusConfig {
            concentration,
            ..small_corpus()
        };
        let lex = Lexicon::new(&cfg);
        for doc in generate_corpus(&cfg).unwrap() {
            for sentence in &doc.sentences {
                for word in sentence.trim_end_matches('.').split(' ') {
                    let own = lex.topic_words[doc.topic].iter().any(|w| w == word);
                    let any_topic = lex.topic_words.iter().flatten().any(|w| w == word);
                    if topical {
                        assert!(own, "{word}");
                    } else {
                        assert!(!any_topic, "{word}");
                    }
                }
            }
        }
    }
}
