//! Joint MLM + NSP pre-training.

use nsp_tensor::{adam_step, AdamConfig, AdamState, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{check_pairable, draw_pair, Document, NspPair};
use crate::error::{Error, Result};
use crate::model::{Batch, EncoderModel};
use crate::tokenizer::{EncodedPair, Vocab, MASK_ID, SPECIALS};

/// Result of [`mask_tokens`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masked {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Selects each non-special position with probability `rate`. A selected
/// token becomes `[MASK]` 80% of the time, a uniform random non-special
/// token 10% of the time and stays unchanged otherwise. Every selected
/// position is a prediction target.
pub fn mask_tokens<R: Rng + ?Sized>(
    ids: &[usize],
    rate: f64,
    vocab_size: usize,
    rng: &mut R,
) -> Masked {
    let mut out = Masked {
        ids: ids.to_vec(),
        positions: Vec::new(),
        targets: Vec::new(),
    };
    if rate <= 0.0 {
        return out;
    }
    let first = SPECIALS.len();
    for (i, &id) in ids.iter().enumerate() {
        if Vocab::is_special(id) || !rng.random_bool(rate.min(1.0)) {
            continue;
        }
        out.positions.push(i);
        out.targets.push(id);
        let r: f64 = rng.random();
        if r < 0.8 {
            out.ids[i] = MASK_ID;
        } else if r < 0.9 && vocab_size > first {
            out.ids[i] = rng.random_range(first..vocab_size);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub mask_rate: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            mask_rate: 0.15,
            max_len: 32,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f32,
    pub mlm: f32,
    pub nsp: f32,
}

/// Sentences of a corpus encoded once up front.
pub struct EncodedCorpus {
    docs: Vec<Vec<Vec<usize>>>,
}

impl EncodedCorpus {
    pub fn new(vocab: &Vocab, docs: &[Document]) -> Self {
        Self {
            docs: docs
                .iter()
                .map(|d| d.sentences.iter().map(|s| vocab.encode(s)).collect())
                .collect(),
        }
    }

    pub fn pair(&self, p: &NspPair, max_len: usize) -> Result<EncodedPair> {
        EncodedPair::from_ids(&self.docs[p.a.0][p.a.1], &self.docs[p.b.0][p.b.1], max_len)
    }
}

/// Trains `model` in place and returns the per-step loss trace.
/// `on_step` sees every step's losses, e.g. for progress output.
pub fn pretrain(
    model: &mut EncoderModel,
    vocab: &Vocab,
    docs: &[Document],
    cfg: &PretrainConfig,
    mut on_step: impl FnMut(&StepLoss),
) -> Result<Vec<StepLoss>> {
    check_pairable(docs)?;
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if vocab.len() != model.config().vocab_size {
        return Err(Error::invalid(format!(
            "vocabulary has {} tokens, model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    let corpus = EncodedCorpus::new(vocab, docs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new(model.params());
    let vocab_size = model.config().vocab_size;
    let mut trace = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut pairs = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let p = draw_pair(docs, &mut rng);
            let mut enc = corpus.pair(&p, cfg.max_len)?;
            let m = mask_tokens(&enc.ids, cfg.mask_rate, vocab_size, &mut rng);
            enc.ids = m.ids;
            enc.mask_positions = m.positions;
            pairs.push((enc, m.targets));
            labels.push(p.label.index());
        }
        let refs: Vec<&EncodedPair> = pairs.iter().map(|(e, _)| e).collect();
        let batch = Batch::new(&refs)?;
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (b, (enc, t)) in pairs.iter().enumerate() {
            rows.extend(enc.mask_positions.iter().map(|&p| b * batch.seq + p));
            targets.extend_from_slice(t);
        }

        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape);
        let hidden = model.encode(&mut tape, &bound, &batch)?;
        let nsp_logits = model.nsp_logits(&mut tape, &bound, hidden, &batch)?;
        let nsp = tape.cross_entropy(nsp_logits, &labels)?;
        let (loss, mlm) = if rows.is_empty() {
            (nsp, 0.0)
        } else {
            let logits = model.mlm_logits(&mut tape, &bound, hidden, &rows)?;
            let mlm = tape.cross_entropy(logits, &targets)?;
            (tape.add(mlm, nsp)?, tape.value(mlm)[0])
        };
        let record = StepLoss {
            step,
            total: tape.value(loss)[0],
            mlm,
            nsp: tape.value(nsp)[0],
        };
        if !record.total.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: record.total,
            });
        }
        let mut grads = tape.backward(loss)?;
        for (param, &var) in model.params_mut().iter_mut().zip(&bound.vars) {
            match grads.take(var) {
                Some(g) => param.set_grad(g)?,
                None => param.zero_grad(),
            }
        }
        let mut params: Vec<&mut _> = model.params_mut().iter_mut().collect();
        adam_step(&mut params, &mut state, &adam)?;
        on_step(&record);
        trace.push(record);
    }
    for p in model.params_mut() {
        p.zero_grad();
    }
    Ok(trace)
}

/// Fraction of `pairs` whose NSP argmax matches the label.
pub fn nsp_accuracy(
    model: &EncoderModel,
    vocab: &Vocab,
    docs: &[Document],
    pairs: &[NspPair],
    max_len: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("no pairs to evaluate"));
    }
    let corpus = EncodedCorpus::new(vocab, docs);
    let enc = pairs
        .iter()
        .map(|p| corpus.pair(p, max_len))
        .collect::<Result<Vec<_>>>()?;
    let probs = model.nsp_probs(&enc)?;
    let correct = probs
        .iter()
        .zip(pairs)
        .filter(|(q, p)| {
            let pred = if q[0] >= q[1] { 0 } else { 1 };
            pred == p.label.index()
        })
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

/// Means of consecutive windows of the total loss.
pub fn smoothed_losses(trace: &[StepLoss], window: usize) -> Vec<f64> {
    trace
        .chunks(window.max(1))
        .map(|w| w.iter().map(|s| s.total as f64).sum::<f64>() / w.len() as f64)
        .collect()
}

/// Vocabulary covering every word of the corpus, frequency ordered.
pub fn corpus_vocab(docs: &[Document]) -> Result<Vocab> {
    Vocab::build(
        docs.iter()
            .flat_map(|d| d.sentences.iter().map(String::as_str)),
        usize::MAX,
        1,
    )
}
