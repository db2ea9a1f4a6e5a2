//! Few-shot tuning: NSP-tuning on coupled templated instances, its
//! ablation variants, and the plain `[CLS]` fine-tuning baseline.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nsp_tensor::{adam_step, truncated_normal, AdamConfig, AdamState, Real, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{Batch, Bound, EncoderModel, INIT_STD, IS_NEXT};
use crate::prompting::{TaskConfig, TaskType};
use crate::scoring::{candidate_inputs, pair_input, predict_candidates_contrast, score_dataset};
use crate::tokenizer::{EncodedPair, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    CoupledBce,
    DecoupledBce,
    CoupledSoftmax,
    ReinitSigmoidHead,
    LinearHeadSoftmax,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::CoupledBce,
        Variant::DecoupledBce,
        Variant::CoupledSoftmax,
        Variant::ReinitSigmoidHead,
        Variant::LinearHeadSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CoupledBce => "coupled_bce",
            Variant::DecoupledBce => "decoupled_bce",
            Variant::CoupledSoftmax => "coupled_softmax",
            Variant::ReinitSigmoidHead => "reinit_sigmoid_head",
            Variant::LinearHeadSoftmax => "linear_head_softmax",
        }
    }

    /// Whether all instances of a sample share a training batch.
    pub fn coupled(self) -> bool {
        self != Variant::DecoupledBce
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown tuning variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningConfig {
    pub epochs: usize,
    pub lr: f32,
    /// Parent samples per batch.
    pub batch_size: usize,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 2e-5,
            batch_size: 8,
            variant: Variant::CoupledBce,
            seed: 13,
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// One templated input with its binary target.
#[derive(Debug, Clone, PartialEq)]
pub struct NspTuningInstance {
    pub pair: EncodedPair,
    /// 1 for the gold verbalization, 0 otherwise.
    pub target: f32,
    pub parent: String,
    /// Candidate index of the verbalization inside the parent sample.
    pub candidate: usize,
}

/// Index of an example's gold label among its candidates.
pub fn gold_index(ex: &Example, task: &TaskConfig) -> Result<usize> {
    let pos = match &ex.candidates {
        Some(c) => c.get_index_of(&ex.label),
        None => task.verbalizer.index_of(&ex.label).ok(),
    };
    pos.ok_or_else(|| Error::UnknownLabel(ex.label.clone()))
}

/// One instance per candidate label, the gold one positive.
pub fn build_instances(
    vocab: &Vocab,
    ex: &Example,
    task: &TaskConfig,
) -> Result<Vec<NspTuningInstance>> {
    if task.task_type == TaskType::Pair {
        return Err(Error::invalid(
            "coupled instances need candidate labels; sentence-pair tasks have none",
        ));
    }
    let gold = gold_index(ex, task)?;
    Ok(candidate_inputs(vocab, ex, task)?
        .into_iter()
        .enumerate()
        .map(|(i, pair)| NspTuningInstance {
            pair,
            target: if i == gold { 1.0 } else { 0.0 },
            parent: ex.id.clone(),
            candidate: i,
        })
        .collect())
}

/// Trainable `|Y|`-way linear layer on the `[CLS]` hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    pub fn new(classes: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            weight: truncated_normal(&[classes, hidden], INIT_STD, &mut rng).trainable(),
            bias: Tensor::zeros(&[classes]).trainable(),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: (Var, Var),
        model: &EncoderModel,
        hidden: Var,
        batch: &Batch,
    ) -> Result<Var> {
        let cls = model.cls_hidden(tape, hidden, batch)?;
        Ok(tape.linear(cls, vars.0, Some(vars.1))?)
    }
}

/// Output layer used for predictions after tuning.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    /// The model's own pooler and NSP head, scored by candidates-contrast.
    Nsp,
    /// A linear head over templated candidate inputs; the label scores
    /// are the summed log-probabilities over the candidate inputs.
    TemplatedLinear(LinearHead),
    /// A linear head over the bare sample text.
    PlainLinear(LinearHead),
}

/// Training objective of one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Mean binary cross-entropy of q(IsNext) against each row's target.
    Bce(Vec<f32>),
    /// Softmax cross-entropy across consecutive groups of `labels` rows,
    /// each row scored by its IsNext log-odds.
    GroupSoftmax { labels: usize, gold: Vec<usize> },
    /// Softmax cross-entropy of a linear head's logits per row.
    HeadCe(Vec<usize>),
}

/// Loss of one batch on `tape`. `head` holds the tape variables of the
/// linear head for [`Objective::HeadCe`].
pub fn objective_loss<T: Real>(
    model: &EncoderModel,
    tape: &mut Tape<T>,
    bound: &Bound,
    head: Option<(&LinearHead, (Var, Var))>,
    batch: &Batch,
    objective: &Objective,
) -> Result<Var> {
    let hidden = model.encode(tape, bound, batch)?;
    match objective {
        Objective::Bce(targets) => {
            let logits = model.nsp_logits(tape, bound, hidden, batch)?;
            let probs = tape.softmax_rows(logits)?;
            let q = tape.slice_cols(probs, IS_NEXT, 1)?;
            Ok(tape.binary_cross_entropy(q, targets)?)
        }
        Objective::GroupSoftmax { labels, gold } => {
            if *labels == 0 || batch.size != labels * gold.len() {
                return Err(Error::invalid("batch does not hold whole coupled groups"));
            }
            let logits = model.nsp_logits(tape, bound, hidden, batch)?;
            let yes = tape.slice_cols(logits, IS_NEXT, 1)?;
            let no = tape.slice_cols(logits, 1 - IS_NEXT, 1)?;
            let odds = tape.sub(yes, no)?;
            let grouped = tape.reshape(odds, &[gold.len(), *labels])?;
            Ok(tape.cross_entropy(grouped, gold)?)
        }
        Objective::HeadCe(gold) => {
            let (h, vars) = head.ok_or_else(|| Error::invalid("objective needs a linear head"))?;
            let logits = h.logits(tape, vars, model, hidden, batch)?;
            Ok(tape.cross_entropy(logits, gold)?)
        }
    }
}

/// A tuned encoder with its prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuned {
    pub model: EncoderModel,
    pub head: Head,
}

impl Tuned {
    pub fn zero_shot(model: EncoderModel) -> Self {
        Self {
            model,
            head: Head::Nsp,
        }
    }

    /// Predicted candidate index of every example.
    pub fn predict(
        &self,
        vocab: &Vocab,
        examples: &[Example],
        task: &TaskConfig,
    ) -> Result<Vec<usize>> {
        match &self.head {
            Head::Nsp => score_dataset(&self.model, vocab, examples, task)?
                .iter()
                .map(|s| predict_candidates_contrast(s.candidates()?))
                .collect(),
            Head::TemplatedLinear(h) => examples
                .iter()
                .map(|ex| {
                    let inputs = candidate_inputs(vocab, ex, task)?;
                    let logp = head_log_probs(&self.model, h, &inputs)?;
                    let mut score = vec![0f64; h.classes()];
                    for row in logp.chunks(h.classes()) {
                        for (s, &l) in score.iter_mut().zip(row) {
                            *s += l;
                        }
                    }
                    Ok(argmax(&score))
                })
                .collect(),
            Head::PlainLinear(h) => {
                let inputs = examples
                    .iter()
                    .map(|ex| plain_input(vocab, ex, task))
                    .collect::<Result<Vec<_>>>()?;
                let logp = head_log_probs(&self.model, h, &inputs)?;
                Ok(logp.chunks(h.classes()).map(argmax).collect())
            }
        }
    }

    /// Fraction of examples whose prediction is the gold label.
    pub fn accuracy(&self, vocab: &Vocab, examples: &[Example], task: &TaskConfig) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::invalid("no examples to evaluate"));
        }
        let pred = self.predict(vocab, examples, task)?;
        let mut correct = 0;
        for (ex, p) in examples.iter().zip(pred) {
            if gold_index(ex, task)? == p {
                correct += 1;
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Row-wise log-softmax of the head logits, flattened.
fn head_log_probs(
    model: &EncoderModel,
    head: &LinearHead,
    inputs: &[EncodedPair],
) -> Result<Vec<f64>> {
    const CHUNK: usize = 64;
    let mut out = Vec::with_capacity(inputs.len() * head.classes());
    for chunk in inputs.chunks(CHUNK) {
        let refs: Vec<&EncodedPair> = chunk.iter().collect();
        let batch = Batch::new(&refs)?;
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape);
        let vars = (tape.leaf(&head.weight), tape.leaf(&head.bias));
        let hidden = model.encode(&mut tape, &bound, &batch)?;
        let logits = head.logits(&mut tape, vars, model, hidden, &batch)?;
        for row in tape.value(logits).chunks(head.classes()) {
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let lse = max
                + row
                    .iter()
                    .map(|&v| (v as f64 - max).exp())
                    .sum::<f64>()
                    .ln();
            out.extend(row.iter().map(|&v| v as f64 - lse));
        }
    }
    Ok(out)
}

/// Untemplated input of the fine-tuning baseline.
pub fn plain_input(vocab: &Vocab, ex: &Example, task: &TaskConfig) -> Result<EncodedPair> {
    match task.task_type {
        TaskType::Pair => pair_input(vocab, ex, task),
        _ => EncodedPair::single(&vocab.encode(&ex.text_a), task.max_len),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches; 0 for epoch 0.
    pub loss: f64,
    pub dev_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    /// Weights of the best development epoch.
    pub tuned: Tuned,
    /// Epoch 0 (before any update) followed by every training epoch.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TuneOutcome {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch]
    }
}

/// Labelled sets evaluated after every epoch.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub dev: &'a [Example],
    pub test: Option<&'a [Example]>,
}

/// SHA-256 over the pooler and NSP head tensors.
pub fn nsp_head_checksum(model: &EncoderModel) -> String {
    let mut h = Sha256::new();
    for t in &model.params()[model.nsp_head_range()] {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Replaces the pooler and NSP head with fresh weights.
pub fn reinit_nsp_head(model: &mut EncoderModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let range = model.nsp_head_range();
    for t in &mut model.params_mut()[range] {
        let shape = t.shape().to_vec();
        *t = if shape.len() == 2 {
            truncated_normal(&shape, INIT_STD, &mut rng)
        } else {
            Tensor::zeros(&shape)
        }
        .trainable();
    }
}

/// NSP-tuning and its ablation variants, selected by `cfg.variant`.
pub fn nsp_tune(
    model: &EncoderModel,
    vocab: &Vocab,
    task: &TaskConfig,
    train: &[Example],
    sets: EvalSets<'_>,
    cfg: &TuningConfig,
) -> Result<TuneOutcome> {
    cfg.validate()?;
    let mut start = model.clone();
    let head = match cfg.variant {
        Variant::CoupledBce | Variant::DecoupledBce | Variant::CoupledSoftmax => Head::Nsp,
        Variant::ReinitSigmoidHead => {
            reinit_nsp_head(&mut start, cfg.seed);
            Head::Nsp
        }
        Variant::LinearHeadSoftmax => Head::TemplatedLinear(LinearHead::new(
            task.labels().len(),
            model.config().hidden,
            cfg.seed,
        )),
    };
    let per_sample = train
        .iter()
        .map(|ex| build_instances(vocab, ex, task))
        .collect::<Result<Vec<_>>>()?;
    let labels = per_sample.first().map_or(0, Vec::len);
    if labels == 0 {
        return Err(Error::invalid("no training samples"));
    }
    if per_sample.iter().any(|s| s.len() != labels) {
        return Err(Error::invalid("training samples differ in candidate count"));
    }
    let gold: Vec<usize> = train
        .iter()
        .map(|ex| gold_index(ex, task))
        .collect::<Result<_>>()?;
    let variant = cfg.variant;
    let per_sample = &per_sample;
    let gold = &gold;
    let batches = move |rng: &mut ChaCha8Rng| -> Vec<(Vec<&EncodedPair>, Objective)> {
        if variant.coupled() {
            let mut order: Vec<usize> = (0..per_sample.len()).collect();
            order.shuffle(rng);
            order
                .chunks(cfg.batch_size)
                .map(|parents| {
                    let inst: Vec<&NspTuningInstance> =
                        parents.iter().flat_map(|&p| &per_sample[p]).collect();
                    let pairs = inst.iter().map(|i| &i.pair).collect();
                    let obj = match variant {
                        Variant::CoupledSoftmax => Objective::GroupSoftmax {
                            labels,
                            gold: parents.iter().map(|&p| gold[p]).collect(),
                        },
                        Variant::LinearHeadSoftmax => Objective::HeadCe(
                            parents
                                .iter()
                                .flat_map(|&p| std::iter::repeat_n(gold[p], labels))
                                .collect(),
                        ),
                        _ => Objective::Bce(inst.iter().map(|i| i.target).collect()),
                    };
                    (pairs, obj)
                })
                .collect()
        } else {
            let mut inst: Vec<&NspTuningInstance> = per_sample.iter().flatten().collect();
            inst.shuffle(rng);
            inst.chunks(cfg.batch_size * labels)
                .map(|c| {
                    (
                        c.iter().map(|i| &i.pair).collect(),
                        Objective::Bce(c.iter().map(|i| i.target).collect()),
                    )
                })
                .collect()
        }
    };
    train_loop(
        Tuned { model: start, head },
        vocab,
        task,
        sets,
        cfg,
        batches,
    )
}

/// Fresh `|Y|`-way head on the `[CLS]` state of the bare text, trained
/// with softmax cross-entropy together with the encoder.
pub fn fine_tune_baseline(
    model: &EncoderModel,
    vocab: &Vocab,
    task: &TaskConfig,
    train: &[Example],
    sets: EvalSets<'_>,
    cfg: &TuningConfig,
) -> Result<TuneOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let inputs = train
        .iter()
        .map(|ex| plain_input(vocab, ex, task))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = train
        .iter()
        .map(|ex| gold_index(ex, task))
        .collect::<Result<_>>()?;
    let head = LinearHead::new(task.labels().len(), model.config().hidden, cfg.seed);
    let batches = |rng: &mut ChaCha8Rng| {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(rng);
        order
            .chunks(cfg.batch_size)
            .map(|c| {
                (
                    c.iter().map(|&i| &inputs[i]).collect(),
                    Objective::HeadCe(c.iter().map(|&i| gold[i]).collect()),
                )
            })
            .collect()
    };
    let tuned = Tuned {
        model: model.clone(),
        head: Head::PlainLinear(head),
    };
    train_loop(tuned, vocab, task, sets, cfg, batches)
}

fn evaluate(
    tuned: &Tuned,
    vocab: &Vocab,
    task: &TaskConfig,
    sets: EvalSets<'_>,
    epoch: usize,
    loss: f64,
) -> Result<EpochRecord> {
    Ok(EpochRecord {
        epoch,
        loss,
        dev_acc: tuned.accuracy(vocab, sets.dev, task)?,
        test_acc: sets
            .test
            .map(|t| tuned.accuracy(vocab, t, task))
            .transpose()?,
    })
}

fn train_loop<'a>(
    mut tuned: Tuned,
    vocab: &Vocab,
    task: &TaskConfig,
    sets: EvalSets<'_>,
    cfg: &TuningConfig,
    mut batches: impl FnMut(&mut ChaCha8Rng) -> Vec<(Vec<&'a EncodedPair>, Objective)>,
) -> Result<TuneOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut head_params: Vec<Tensor> = match &tuned.head {
        Head::Nsp => Vec::new(),
        Head::TemplatedLinear(h) | Head::PlainLinear(h) => vec![h.weight.clone(), h.bias.clone()],
    };
    let mut state = AdamState::new(tuned.model.params().iter().chain(&head_params));
    let mut history = vec![evaluate(&tuned, vocab, task, sets, 0, 0.0)?];
    let mut best = (0, tuned.clone());
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let plan = batches(&mut rng);
        let n_batches = plan.len();
        for (pairs, objective) in plan {
            let batch = Batch::new(&pairs)?;
            let mut tape = Tape::<f32>::new();
            let bound = tuned.model.bind(&mut tape);
            let head_vars: Vec<Var> = head_params.iter().map(|t| tape.leaf(t)).collect();
            let head = match &tuned.head {
                Head::Nsp => None,
                Head::TemplatedLinear(h) | Head::PlainLinear(h) => {
                    Some((h, (head_vars[0], head_vars[1])))
                }
            };
            let loss = objective_loss(&tuned.model, &mut tape, &bound, head, &batch, &objective)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            total += value as f64;
            let mut grads = tape.backward(loss)?;
            let params = tuned.model.params_mut().iter_mut().zip(&bound.vars);
            for (p, &v) in params.chain(head_params.iter_mut().zip(&head_vars)) {
                match grads.take(v) {
                    Some(g) => p.set_grad(g)?,
                    None => p.zero_grad(),
                }
            }
            let mut all: Vec<&mut Tensor> = tuned
                .model
                .params_mut()
                .iter_mut()
                .chain(head_params.iter_mut())
                .collect();
            adam_step(&mut all, &mut state, &adam)?;
            for p in all {
                p.zero_grad();
            }
            sync_head(&mut tuned.head, &head_params);
            step += 1;
        }
        let record = evaluate(
            &tuned,
            vocab,
            task,
            sets,
            epoch,
            total / n_batches.max(1) as f64,
        )?;
        if epoch == 1 || record.dev_acc > history[best.0].dev_acc {
            best = (epoch, tuned.clone());
        }
        history.push(record);
    }
    Ok(TuneOutcome {
        tuned: best.1,
        history,
        best_epoch: best.0,
    })
}

fn sync_head(head: &mut Head, params: &[Tensor]) {
    if let Head::TemplatedLinear(h) | Head::PlainLinear(h) = head {
        h.weight = params[0].clone();
        h.bias = params[1].clone();
    }
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub variant: String,
    pub seed: u64,
    pub epoch: usize,
    pub dev_acc: f64,
    pub test_acc: Option<f64>,
}

impl ResultRow {
    pub fn from_history(variant: &str, seed: u64, history: &[EpochRecord]) -> Vec<Self> {
        history
            .iter()
            .map(|r| ResultRow {
                variant: variant.to_string(),
                seed,
                epoch: r.epoch,
                dev_acc: r.dev_acc,
                test_acc: r.test_acc,
            })
            .collect()
    }
}

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = String::from("variant,seed,epoch,dev_acc,test_acc\n");
    for r in rows {
        let test = r.test_acc.map(|t| format!("{t:.6}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            r.variant, r.seed, r.epoch, r.dev_acc, test
        ));
    }
    s
}

pub fn write_results(path: impl AsRef<Path>, rows: &[ResultRow]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, results_csv(rows)).map_err(|e| Error::io(path, e))
}
