//! Answer mapping: candidates-contrast, samples-contrast, dev thresholds,
//! and masked-LM (PET-style) label scoring.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{EncoderModel, IS_NEXT};
use crate::prompting::{
    encode_prompted, render_pair, render_pet, render_two_stage, PromptTemplate, SortOrder,
    TaskConfig, TaskType, Verbalizer, TEXT_SLOT,
};
use crate::tokenizer::{EncodedPair, Vocab};

/// IsNext probability of one pair, or of every candidate of a sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Score {
    Single(f32),
    Candidates(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub q: Score,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
}

impl ScoredSample {
    pub fn single(&self) -> Result<f32> {
        match self.q {
            Score::Single(q) => Ok(q),
            Score::Candidates(_) => Err(Error::invalid(format!(
                "sample {} carries candidate scores, expected one probability",
                self.id
            ))),
        }
    }

    pub fn candidates(&self) -> Result<&[f32]> {
        match &self.q {
            Score::Candidates(c) => Ok(c),
            Score::Single(_) => Err(Error::invalid(format!(
                "sample {} carries one probability, expected candidate scores",
                self.id
            ))),
        }
    }
}

pub fn read_scored(path: impl AsRef<Path>) -> Result<Vec<ScoredSample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let s: ScoredSample = serde_json::from_str(l).map_err(|e| Error::Line {
                line: i + 1,
                message: e.to_string(),
            })?;
            let bad = match &s.q {
                Score::Single(q) => !(0.0..=1.0).contains(q),
                Score::Candidates(c) => c.iter().any(|q| !(0.0..=1.0).contains(q)),
            };
            if bad {
                return Err(Error::Line {
                    line: i + 1,
                    message: "probabilities must lie in [0, 1]".into(),
                });
            }
            Ok(s)
        })
        .collect()
}

pub fn write_scored(path: impl AsRef<Path>, samples: &[ScoredSample]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in samples {
        text.push_str(&serde_json::to_string(s).map_err(|e| Error::json("scored sample", e))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Candidate phrases for an example: its own descriptions when present,
/// otherwise the task verbalizer.
fn candidate_phrases<'a>(ex: &'a Example, task: &'a TaskConfig) -> Vec<&'a str> {
    match &ex.candidates {
        Some(c) => c.values().map(String::as_str).collect(),
        None => (0..task.verbalizer.len())
            .map(|i| task.verbalizer.phrase_at(i).expect("index in range"))
            .collect(),
    }
}

/// One encoded input per candidate label, in label order.
pub fn candidate_inputs(
    vocab: &Vocab,
    ex: &Example,
    task: &TaskConfig,
) -> Result<Vec<EncodedPair>> {
    let phrases = candidate_phrases(ex, task);
    if phrases.len() < 2 {
        return Err(Error::invalid(format!(
            "example {} has fewer than two candidates",
            ex.id
        )));
    }
    let x_ids = vocab.encode(&ex.text_a);
    phrases
        .iter()
        .enumerate()
        .map(|(i, phrase)| {
            let r = match task.task_type {
                TaskType::Single => {
                    let t = task
                        .template
                        .as_ref()
                        .ok_or_else(|| Error::invalid("task has no template"))?;
                    encode_prompted(
                        &x_ids,
                        &vocab.encode(&t.fill(phrase)),
                        t.position,
                        task.max_len,
                    )
                }
                TaskType::TwoStage => {
                    let p = task
                        .two_stage
                        .as_ref()
                        .ok_or_else(|| Error::invalid("task has no two-stage prompt"))?;
                    let mention = ex.mention.as_deref().unwrap_or("");
                    let (a, b) = render_two_stage(&ex.text_a, mention, phrase, p)?;
                    if p.stage1.contains(TEXT_SLOT) {
                        vocab.encode_pair(&a, &b, task.max_len)
                    } else {
                        let tail = &a[ex.text_a.len()..];
                        let mut prompt_a = vocab.encode(tail);
                        let b_ids = vocab.encode(&b);
                        let room = task
                            .max_len
                            .saturating_sub(3 + b_ids.len() + prompt_a.len());
                        let mut a_ids = x_ids[..x_ids.len().min(room)].to_vec();
                        a_ids.append(&mut prompt_a);
                        EncodedPair::from_ids(&a_ids, &b_ids, task.max_len)
                    }
                }
                TaskType::Pair => Err(Error::invalid("pair tasks have no candidates")),
            };
            r.map_err(|e| Error::invalid(format!("example {} candidate {i}: {e}", ex.id)))
        })
        .collect()
}

/// The encoded sentence pair of a sentence-pair example.
pub fn pair_input(vocab: &Vocab, ex: &Example, task: &TaskConfig) -> Result<EncodedPair> {
    let b = ex
        .text_b
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("example {} has no text_b", ex.id)))?;
    let (a, b) = render_pair(&ex.text_a, b, task.pair_order);
    vocab.encode_pair(&a, &b, task.max_len)
}

/// IsNext probability of every candidate; candidates are scored
/// independently, so they need not sum to one.
pub fn score_candidates(
    model: &EncoderModel,
    vocab: &Vocab,
    ex: &Example,
    task: &TaskConfig,
) -> Result<ScoredSample> {
    Ok(score_dataset(model, vocab, std::slice::from_ref(ex), task)?.remove(0))
}

/// Scores every example, batching forward passes across examples.
pub fn score_dataset(
    model: &EncoderModel,
    vocab: &Vocab,
    examples: &[Example],
    task: &TaskConfig,
) -> Result<Vec<ScoredSample>> {
    let mut inputs = Vec::new();
    let mut counts = Vec::with_capacity(examples.len());
    for ex in examples {
        if task.task_type == TaskType::Pair {
            inputs.push(pair_input(vocab, ex, task)?);
            counts.push(1);
        } else {
            let c = candidate_inputs(vocab, ex, task)?;
            counts.push(c.len());
            inputs.extend(c);
        }
    }
    let probs = model.nsp_probs(&inputs)?;
    let mut at = 0;
    Ok(examples
        .iter()
        .zip(counts)
        .map(|(ex, n)| {
            let qs: Vec<f32> = probs[at..at + n].iter().map(|p| p[IS_NEXT]).collect();
            at += n;
            ScoredSample {
                id: ex.id.clone(),
                q: if task.task_type == TaskType::Pair {
                    Score::Single(qs[0])
                } else {
                    Score::Candidates(qs)
                },
                gold: Some(ex.label.clone()),
            }
        })
        .collect())
}

/// Index of the largest probability; ties go to the lowest index and NaN
/// never wins.
pub fn predict_candidates_contrast(q: &[f32]) -> Result<usize> {
    if q.is_empty() {
        return Err(Error::invalid("no candidates to compare"));
    }
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] || (q[best].is_nan() && !v.is_nan()) {
            best = i;
        }
    }
    Ok(best)
}

/// Labels in declared order with their proportions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    labels: Vec<String>,
    proportions: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(labels: Vec<String>, proportions: Vec<f64>) -> Result<Self> {
        if labels.is_empty() || labels.len() != proportions.len() {
            return Err(Error::invalid(
                "label distribution needs one proportion per label",
            ));
        }
        if proportions.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("proportions must be nonnegative"));
        }
        let total: f64 = proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("proportions sum to {total}, not 1")));
        }
        Ok(Self {
            labels,
            proportions,
        })
    }

    pub fn uniform(labels: &[&str]) -> Result<Self> {
        let n = labels.len();
        Self::new(
            labels.iter().map(|l| l.to_string()).collect(),
            vec![1.0 / n as f64; n],
        )
    }

    /// Proportions of each label among `gold`, in `labels` order.
    pub fn from_gold(labels: &[&str], gold: &[&str]) -> Result<Self> {
        if gold.is_empty() {
            return Err(Error::invalid("no gold labels"));
        }
        let mut counts = vec![0usize; labels.len()];
        for g in gold {
            let i = labels
                .iter()
                .position(|l| l == g)
                .ok_or_else(|| Error::UnknownLabel(g.to_string()))?;
            counts[i] += 1;
        }
        let n = gold.len() as f64;
        Self::new(
            labels.iter().map(|l| l.to_string()).collect(),
            counts.iter().map(|&c| c as f64 / n).collect(),
        )
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn proportions(&self) -> &[f64] {
        &self.proportions
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Label with the largest proportion, earliest on ties.
    pub fn majority(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.proportions.iter().enumerate() {
            if p > self.proportions[best] {
                best = i;
            }
        }
        best
    }
}

const REMAINDER_TOL: f64 = 1e-9;

/// Largest-remainder split of `n` seats by `proportions`: every label gets
/// the floor of its quota and the leftover seats go to the largest
/// fractional parts, earlier labels first on ties.
pub fn apportion(n: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut seats: Vec<usize> = quotas
        .iter()
        .map(|q| (q + REMAINDER_TOL).floor().max(0.0) as usize)
        .collect();
    let assigned: usize = seats.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    let frac = |i: usize| (quotas[i] - seats[i] as f64).max(0.0);
    order.sort_by(|&a, &b| {
        let (fa, fb) = (frac(a), frac(b));
        if (fa - fb).abs() <= REMAINDER_TOL {
            a.cmp(&b)
        } else {
            fb.partial_cmp(&fa).unwrap_or(Ordering::Equal)
        }
    });
    if assigned <= n {
        for &i in order.iter().cycle().take(n - assigned) {
            seats[i] += 1;
        }
    } else {
        for &i in order.iter().rev().cycle().take(assigned - n) {
            seats[i] = seats[i].saturating_sub(1);
        }
    }
    seats
}

/// Samples-contrast answer mapping. Samples are cut into consecutive
/// batches of `bs`; inside a batch they are ranked by probability in
/// `order` (ties by id, ascending) and the ranking is divided into label
/// groups sized by [`apportion`], the first group taking the first label
/// of `d`. When `bs` is smaller than the number of labels every sample gets
/// the majority label of `d`. Returns label indices into `d`.
pub fn samples_contrast(
    samples: &[ScoredSample],
    order: SortOrder,
    d: &LabelDistribution,
    bs: usize,
) -> Result<Vec<usize>> {
    if bs == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let q = samples
        .iter()
        .map(ScoredSample::single)
        .collect::<Result<Vec<f32>>>()?;
    if bs < d.len() {
        return Ok(vec![d.majority(); samples.len()]);
    }
    let mut out = vec![0; samples.len()];
    for start in (0..samples.len()).step_by(bs) {
        let end = (start + bs).min(samples.len());
        let mut idx: Vec<usize> = (start..end).collect();
        idx.sort_by(|&a, &b| {
            let c = q[a].partial_cmp(&q[b]).unwrap_or(Ordering::Equal);
            let c = match order {
                SortOrder::Ascending => c,
                SortOrder::Descending => c.reverse(),
            };
            c.then_with(|| samples[a].id.cmp(&samples[b].id))
        });
        let sizes = apportion(idx.len(), d.proportions());
        let mut it = idx.into_iter();
        for (label, &size) in sizes.iter().enumerate() {
            for i in it.by_ref().take(size) {
                out[i] = label;
            }
        }
    }
    Ok(out)
}

/// Probability cut points learned from a labelled development set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Label indices from lowest to highest mean probability.
    pub order: Vec<usize>,
    /// `order.len() − 1` increasing cut points.
    pub cuts: Vec<f64>,
}

/// Orders the labels present in `dev` by mean probability and places a cut
/// at each cumulative gold count, midway between the adjacent order
/// statistics. `dev` holds (probability, label index) pairs.
pub fn thresholds_from_dev(dev: &[(f32, usize)]) -> Result<Thresholds> {
    if dev.is_empty() {
        return Err(Error::invalid("empty development set"));
    }
    let n_labels = dev.iter().map(|&(_, l)| l).max().unwrap_or(0) + 1;
    let mut sum = vec![0f64; n_labels];
    let mut count = vec![0usize; n_labels];
    for &(q, l) in dev {
        sum[l] += q as f64;
        count[l] += 1;
    }
    let mut order: Vec<usize> = (0..n_labels).filter(|&l| count[l] > 0).collect();
    if order.len() < 2 {
        return Err(Error::invalid(
            "development set has a single label; no boundary can be placed",
        ));
    }
    let mean = |l: usize| sum[l] / count[l] as f64;
    order.sort_by(|&a, &b| {
        mean(a)
            .partial_cmp(&mean(b))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut sorted: Vec<f64> = dev.iter().map(|&(q, _)| q as f64).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mut cuts = Vec::with_capacity(order.len() - 1);
    let mut cum = 0;
    for &l in &order[..order.len() - 1] {
        cum += count[l];
        cuts.push((sorted[cum - 1] + sorted[cum]) / 2.0);
    }
    Ok(Thresholds { order, cuts })
}

impl Thresholds {
    /// Label index for a probability. A value equal to a cut goes to the
    /// upper label.
    pub fn apply(&self, q: f32) -> usize {
        let above = self.cuts.iter().filter(|&&c| q as f64 >= c).count();
        self.order[above]
    }
}

/// PET-style label scores: per label, the product of the masked-LM
/// probabilities of the label's tokens, then a softmax over labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PetScore {
    pub products: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn pet_score(
    model: &EncoderModel,
    vocab: &Vocab,
    x: &str,
    template: &PromptTemplate,
    verbalizer: &Verbalizer,
    max_len: usize,
) -> Result<PetScore> {
    let mut products = Vec::with_capacity(verbalizer.len());
    for label in verbalizer.labels() {
        let input = render_pet(vocab, x, template, verbalizer, label, max_len)?;
        let dists = model.mlm_distributions(&input.pair)?;
        let p: f64 = dists
            .iter()
            .zip(&input.targets)
            .map(|(d, &t)| d[t] as f64)
            .product();
        products.push(p);
    }
    let probs = softmax64(&products);
    Ok(PetScore { products, probs })
}

fn softmax64(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over [0, 1]; a probability of exactly 1 lands in the
/// last bin.
pub fn probability_histogram(q: &[f32], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins < 2 {
        return Err(Error::invalid("a histogram needs at least two bins"));
    }
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: i as f64 / bins as f64,
            hi: (i + 1) as f64 / bins as f64,
            count: 0,
        })
        .collect();
    for &v in q {
        let v = (v as f64).clamp(0.0, 1.0);
        let i = ((v * bins as f64) as usize).min(bins - 1);
        out[i].count += 1;
    }
    Ok(out)
}

pub fn histogram_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for b in bins {
        s.push_str(&format!("{},{},{}\n", b.lo, b.hi, b.count));
    }
    s
}

pub fn write_histogram(path: impl AsRef<Path>, bins: &[HistogramBin]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, histogram_csv(bins)).map_err(|e| Error::io(path, e))
}
