//! Synthetic downstream tasks, evaluation modes and multi-seed experiments.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{generate_documents, CorpusConfig, Lexicon};
use crate::data::{kshot_split, Example, DEFAULT_SEEDS};
use crate::error::{Error, Result};
use crate::model::EncoderModel;
use crate::prompting::{
    MappingSpec, PairOrder, Position, PromptTemplate, SortOrder, Strategy, TaskConfig, TaskType,
    Verbalizer,
};
use crate::scoring::{
    pet_score, samples_contrast, score_dataset, thresholds_from_dev, LabelDistribution,
};
use crate::tokenizer::Vocab;
use crate::tuning::{
    fine_tune_baseline, gold_index, nsp_tune, EvalSets, ResultRow, TuneOutcome, Tuned,
    TuningConfig, Variant,
};

/// First document id of synthetic task documents; pre-training corpora
/// must stay below it.
pub const TASK_ID_BASE: u64 = 1 << 40;
/// Documents reserved per task seed.
const TASK_ID_STRIDE: u64 = 1 << 20;

/// Template of the synthetic topic task.
pub const TOPIC_TEMPLATE: &str = "It was {label}.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Label = document topic, one sentence per example.
    Topic,
    /// Label = whether sentence B follows sentence A.
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub kind: SyntheticKind,
    /// Documents behind the sampling pool.
    pub pool_documents: usize,
    /// Documents behind the test set.
    pub test_documents: usize,
    /// Sentence pairs drawn per document for the pair task.
    pub pairs_per_document: usize,
    pub max_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Topic,
            pool_documents: 100,
            test_documents: 50,
            pairs_per_document: 8,
            max_len: 64,
        }
    }
}

/// A labelled pool for K-shot sampling, a separate test set and the task
/// configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub pool: Vec<Example>,
    pub test: Vec<Example>,
    pub task: TaskConfig,
    /// Corpus document ids used by the task.
    pub document_ids: Range<u64>,
}

fn topic_label(t: usize) -> String {
    format!("topic{t}")
}

/// Builds a downstream task from documents generated under `corpus` with
/// ids above [`TASK_ID_BASE`], so they never overlap a pre-training corpus.
pub fn make_synthetic_task(
    corpus: &CorpusConfig,
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<SyntheticTask> {
    corpus.validate()?;
    if corpus.documents as u64 >= TASK_ID_BASE {
        return Err(Error::invalid(
            "pre-training corpus overlaps the task id range",
        ));
    }
    let total = (cfg.pool_documents + cfg.test_documents) as u64;
    if cfg.pool_documents == 0 || cfg.test_documents == 0 || total > TASK_ID_STRIDE {
        return Err(Error::invalid("task needs pool and test documents"));
    }
    if seed >= (u64::MAX - TASK_ID_BASE) / TASK_ID_STRIDE {
        return Err(Error::invalid(format!("task seed {seed} is out of range")));
    }
    let start = TASK_ID_BASE + seed * TASK_ID_STRIDE;
    let ids = start..start + total;
    let docs = generate_documents(corpus, ids.clone())?;
    let (pool_docs, test_docs) = docs.split_at(cfg.pool_documents);
    let lex = Lexicon::new(corpus);

    let (pool, test, task) = match cfg.kind {
        SyntheticKind::Topic => {
            let examples = |docs: &[crate::corpus::Document], offset: u64| {
                docs.iter()
                    .enumerate()
                    .flat_map(|(d, doc)| {
                        let id = offset + d as u64;
                        doc.sentences.iter().enumerate().map(move |(j, s)| {
                            Example::single(format!("d{id}s{j}"), s.clone(), topic_label(doc.topic))
                        })
                    })
                    .collect::<Vec<_>>()
            };
            let verbalizer = Verbalizer::from_pairs(
                (0..corpus.topics).map(|t| (topic_label(t), lex.topic_name(t).to_string())),
            )?;
            let task = TaskConfig {
                task_type: TaskType::Single,
                template: Some(PromptTemplate::new(TOPIC_TEMPLATE, Position::Suffix)?),
                verbalizer,
                mapping: MappingSpec {
                    strategy: Strategy::CandidatesContrast,
                    order: SortOrder::Ascending,
                    batch_size: None,
                },
                two_stage: None,
                pair_order: PairOrder::default(),
                max_len: cfg.max_len,
            };
            (
                examples(pool_docs, start),
                examples(test_docs, start + cfg.pool_documents as u64),
                task,
            )
        }
        SyntheticKind::Pair => {
            if corpus.sentences_per_document < 2 || docs.len() < 2 {
                return Err(Error::invalid("pair task needs two-sentence documents"));
            }
            let pairs = |docs: &[crate::corpus::Document], offset: u64| -> Vec<Example> {
                let mut out = Vec::new();
                let n = docs.len();
                let spd = corpus.sentences_per_document;
                for (d, doc) in docs.iter().enumerate() {
                    for j in 0..cfg.pairs_per_document {
                        let s = j % (spd - 1);
                        let id = format!("d{}p{j}", offset + d as u64);
                        let a = doc.sentences[s].clone();
                        let (b, label) = if (d + j) % 2 == 0 {
                            (doc.sentences[s + 1].clone(), "Entail")
                        } else {
                            let other = &docs[(d + 1 + j % (n - 1)) % n];
                            (
                                other.sentences[(s + j) % other.sentences.len()].clone(),
                                "NotEntail",
                            )
                        };
                        out.push(Example::pair(id, a, b, label));
                    }
                }
                out
            };
            let task = TaskConfig {
                task_type: TaskType::Pair,
                template: None,
                verbalizer: Verbalizer::from_pairs([("NotEntail", "no"), ("Entail", "yes")])?,
                mapping: MappingSpec {
                    strategy: Strategy::SamplesContrast,
                    order: SortOrder::Ascending,
                    batch_size: None,
                },
                two_stage: None,
                pair_order: PairOrder::default(),
                max_len: cfg.max_len,
            };
            (
                pairs(pool_docs, start),
                pairs(test_docs, start + cfg.pool_documents as u64),
                task,
            )
        }
    };
    Ok(SyntheticTask {
        pool,
        test,
        task,
        document_ids: ids,
    })
}

/// How predictions are produced. Zero-shot modes carry no labelled data.
#[derive(Debug, Clone, Copy)]
pub enum EvalMode<'a> {
    /// Candidates-contrast over NSP scores.
    ZeroShotNsp,
    /// Masked-LM label scoring.
    ZeroShotPet,
    /// Samples-contrast with a label distribution, e.g. from dev.
    SamplesContrast(&'a LabelDistribution),
    /// Cut points learned from scored dev examples.
    Thresholds {
        dev: &'a [Example],
    },
    Tuned(&'a Tuned),
}

impl EvalMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            EvalMode::ZeroShotNsp => "zero_shot_nsp",
            EvalMode::ZeroShotPet => "zero_shot_pet",
            EvalMode::SamplesContrast(_) => "samples_contrast",
            EvalMode::Thresholds { .. } => "thresholds",
            EvalMode::Tuned(_) => "tuned",
        }
    }
}

fn mismatch(mode: &EvalMode<'_>, task: &TaskConfig) -> Error {
    Error::invalid(format!(
        "mode {} does not apply to {:?} tasks",
        mode.name(),
        task.task_type
    ))
}

/// Predicted label index (verbalizer order) for every example.
pub fn predict(
    model: &EncoderModel,
    vocab: &Vocab,
    examples: &[Example],
    task: &TaskConfig,
    mode: EvalMode<'_>,
) -> Result<Vec<usize>> {
    let pair_task = task.task_type == TaskType::Pair;
    match mode {
        EvalMode::ZeroShotNsp => {
            if pair_task {
                return Err(mismatch(&mode, task));
            }
            Tuned::zero_shot(model.clone()).predict(vocab, examples, task)
        }
        EvalMode::ZeroShotPet => {
            let template = match (&task.task_type, &task.template) {
                (TaskType::Single, Some(t)) => t,
                _ => return Err(mismatch(&mode, task)),
            };
            examples
                .iter()
                .map(|ex| {
                    let s = pet_score(
                        model,
                        vocab,
                        &ex.text_a,
                        template,
                        &task.verbalizer,
                        task.max_len,
                    )?;
                    Ok(argmax(&s.probs))
                })
                .collect()
        }
        EvalMode::SamplesContrast(d) => {
            if !pair_task {
                return Err(mismatch(&mode, task));
            }
            if d.labels()
                .iter()
                .map(String::as_str)
                .ne(task.verbalizer.labels())
            {
                return Err(Error::invalid(
                    "distribution labels differ from the task labels",
                ));
            }
            let scored = score_dataset(model, vocab, examples, task)?;
            let bs = task.mapping.batch_size.unwrap_or(examples.len()).max(1);
            samples_contrast(&scored, task.mapping.order, d, bs)
        }
        EvalMode::Thresholds { dev } => {
            if !pair_task {
                return Err(mismatch(&mode, task));
            }
            let dev_scored = score_dataset(model, vocab, dev, task)?;
            let dev_q = dev_scored
                .iter()
                .zip(dev)
                .map(|(s, ex)| Ok((s.single()?, gold_index(ex, task)?)))
                .collect::<Result<Vec<_>>>()?;
            let t = thresholds_from_dev(&dev_q)?;
            score_dataset(model, vocab, examples, task)?
                .iter()
                .map(|s| Ok(t.apply(s.single()?)))
                .collect()
        }
        EvalMode::Tuned(tuned) => tuned.predict(vocab, examples, task),
    }
}

/// Fraction of examples predicted correctly.
pub fn evaluate(
    model: &EncoderModel,
    vocab: &Vocab,
    examples: &[Example],
    task: &TaskConfig,
    mode: EvalMode<'_>,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let pred = predict(model, vocab, examples, task, mode)?;
    accuracy(&pred, examples, task)
}

pub fn accuracy(pred: &[usize], examples: &[Example], task: &TaskConfig) -> Result<f64> {
    let mut correct = 0;
    for (p, ex) in pred.iter().zip(examples) {
        if *p == gold_index(ex, task)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
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

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "variant")]
pub enum Method {
    ZeroShot,
    NspTune(Variant),
    FineTune,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::ZeroShot => "zero_shot".into(),
            Method::NspTune(v) => v.name().into(),
            Method::FineTune => "fine_tune".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub method: Method,
    pub k: usize,
    pub seeds: Vec<u64>,
    pub tuning: TuningConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            method: Method::NspTune(Variant::CoupledBce),
            k: 16,
            seeds: DEFAULT_SEEDS.to_vec(),
            tuning: TuningConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub split_fingerprint: String,
    pub best_epoch: usize,
    pub dev_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: String,
    pub seeds: Vec<SeedResult>,
    pub mean: f64,
    /// Population standard deviation of the per-seed test accuracies.
    pub std: f64,
    pub config_fingerprint: String,
    pub checkpoint_fingerprint: String,
    /// Per-epoch rows of every seed.
    pub rows: Vec<ResultRow>,
}

impl ExperimentReport {
    pub fn test_accuracies(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.test_acc).collect()
    }
}

fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// SHA-256 over the config and parameter values of a model.
pub fn model_fingerprint(model: &EncoderModel) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model.config()).unwrap_or_default());
    for t in model.params() {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn split_fingerprint(train: &[Example], dev: &[Example]) -> String {
    let ids: Vec<&str> = train
        .iter()
        .map(|e| e.id.as_str())
        .chain(std::iter::once("|"))
        .chain(dev.iter().map(|e| e.id.as_str()))
        .collect();
    sha256_hex(ids.join("\n"))
}

/// Runs `cfg.method` once per seed: K-shot split, optional tuning, test
/// evaluation. A failing seed aborts the run and is named in the error.
pub fn run_experiment(
    model: &EncoderModel,
    vocab: &Vocab,
    pool: &[Example],
    test: &[Example],
    task: &TaskConfig,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::invalid("experiment needs at least one seed"));
    }
    let config_fingerprint = sha256_hex(
        serde_json::to_vec(&(cfg, task)).map_err(|e| Error::json("experiment config", e))?,
    );
    let labels = task.labels();
    let name = cfg.method.name();
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let run = || -> Result<(SeedResult, Vec<ResultRow>)> {
            let split = kshot_split(pool, &labels, cfg.k, seed)?;
            let fp = split_fingerprint(&split.train, &split.dev);
            let tcfg = TuningConfig {
                seed,
                ..cfg.tuning.clone()
            };
            let sets = EvalSets {
                dev: &split.dev,
                test: Some(test),
            };
            let outcome: TuneOutcome = match cfg.method {
                Method::ZeroShot => {
                    let zero = TuningConfig { epochs: 0, ..tcfg };
                    nsp_tune(model, vocab, task, &split.train, sets, &zero)?
                }
                Method::NspTune(variant) => nsp_tune(
                    model,
                    vocab,
                    task,
                    &split.train,
                    sets,
                    &TuningConfig { variant, ..tcfg },
                )?,
                Method::FineTune => {
                    fine_tune_baseline(model, vocab, task, &split.train, sets, &tcfg)?
                }
            };
            let best = outcome.best();
            Ok((
                SeedResult {
                    seed,
                    split_fingerprint: fp,
                    best_epoch: outcome.best_epoch,
                    dev_acc: best.dev_acc,
                    test_acc: best.test_acc.unwrap_or(f64::NAN),
                },
                ResultRow::from_history(&name, seed, &outcome.history),
            ))
        };
        let (result, mut r) = run().map_err(|e| Error::Seed {
            seed,
            source: Box::new(e),
        })?;
        seeds.push(result);
        rows.append(&mut r);
    }
    let accs: Vec<f64> = seeds.iter().map(|s| s.test_acc).collect();
    let (mean, std) = mean_std(&accs);
    Ok(ExperimentReport {
        method: name,
        seeds,
        mean,
        std,
        config_fingerprint,
        checkpoint_fingerprint: model_fingerprint(model),
        rows,
    })
}

/// Comparison table of several reports: mean and std of test and dev
/// accuracy per method.
pub fn summary_csv(reports: &[ExperimentReport]) -> String {
    let mut s = String::from("variant,runs,test_mean,test_std,dev_mean,dev_std\n");
    for r in reports {
        let dev: Vec<f64> = r.seeds.iter().map(|x| x.dev_acc).collect();
        let (dm, ds) = mean_std(&dev);
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.method,
            r.seeds.len(),
            r.mean,
            r.std,
            dm,
            ds
        ));
    }
    s
}
