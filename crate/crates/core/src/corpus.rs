//! Synthetic topic corpus and NSP pair sampling.
//!
//! Every document has a topic and, inside it, a sub-topic. Content tokens
//! come from the topic lexicon with probability `concentration`, otherwise
//! from the shared lexicon. A topic lexicon starts with `core_words` that
//! every sub-topic uses; the rest is split evenly between sub-topics, and a
//! topic token is drawn from the document's own slice with probability
//! `subtopic_focus`. Each document draws from its own random stream keyed
//! by its id, so a document's text does not depend on which other ids are
//! generated alongside it.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordinary words placed at the front of the shared lexicon so templates
/// such as "It was {label}." tokenize to known ids.
pub const FUNCTION_WORDS: [&str; 16] = [
    "it", "was", "this", "is", "about", "the", "a", "of", "and", "to", "in", "that", "topic",
    "news", "story", "really",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub topics: usize,
    pub words_per_topic: usize,
    pub shared_words: usize,
    pub documents: usize,
    pub sentences_per_document: usize,
    pub min_sentence_len: usize,
    pub max_sentence_len: usize,
    /// Probability that a content token comes from the topic lexicon.
    pub concentration: f64,
    pub subtopics: usize,
    pub core_words: usize,
    /// Probability that a topic token comes from the sub-topic slice rather
    /// than the core words.
    pub subtopic_focus: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            topics: 4,
            words_per_topic: 40,
            shared_words: 120,
            documents: 400,
            sentences_per_document: 8,
            min_sentence_len: 5,
            max_sentence_len: 12,
            concentration: 0.5,
            subtopics: 4,
            core_words: 8,
            subtopic_focus: 0.8,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::invalid(m.to_string()));
        if self.topics == 0 || self.documents == 0 {
            return fail("corpus needs at least one topic and one document");
        }
        if self.words_per_topic == 0 || self.shared_words < FUNCTION_WORDS.len() {
            return fail("lexicons are too small");
        }
        if self.sentences_per_document == 0 {
            return fail("documents need at least one sentence");
        }
        if self.min_sentence_len == 0 || self.min_sentence_len > self.max_sentence_len {
            return fail("invalid sentence length range");
        }
        if !(0.0..=1.0).contains(&self.concentration) || !(0.0..=1.0).contains(&self.subtopic_focus)
        {
            return fail("probabilities must lie in [0, 1]");
        }
        if self.subtopics == 0 || self.core_words + self.subtopics > self.words_per_topic {
            return fail("sub-topic slices do not fit in the topic lexicon");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub topic: usize,
    pub sentences: Vec<String>,
}

/// Word inventory of a corpus configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    pub topic_words: Vec<Vec<String>>,
    pub shared: Vec<String>,
}

impl Lexicon {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let topic_words = (0..cfg.topics)
            .map(|t| (0..cfg.words_per_topic).map(|i| topic_word(t, i)).collect())
            .collect();
        let shared = FUNCTION_WORDS
            .iter()
            .map(|w| w.to_string())
            .chain((FUNCTION_WORDS.len()..cfg.shared_words).map(|i| format!("w{i}")))
            .collect();
        Self {
            topic_words,
            shared,
        }
    }

    /// The word standing for topic `t` in verbalizers: its first core word.
    pub fn topic_name(&self, t: usize) -> &str {
        &self.topic_words[t][0]
    }
}

/// Spelling of word `i` of topic `t`: a letter per topic plus an index,
/// e.g. "ka3" for topic 0.
pub fn topic_word(t: usize, i: usize) -> String {
    const STEMS: [&str; 12] = [
        "ka", "lo", "mi", "nu", "pe", "ro", "su", "ti", "vo", "xa", "ze", "bu",
    ];
    let stem = STEMS[t % STEMS.len()];
    if t < STEMS.len() {
        format!("{stem}{i}")
    } else {
        format!("{stem}{}x{i}", t / STEMS.len())
    }
}

/// Documents with ids in `ids`, topics assigned round-robin by id.
pub fn generate_documents(cfg: &CorpusConfig, ids: Range<u64>) -> Result<Vec<Document>> {
    cfg.validate()?;
    let lex = Lexicon::new(cfg);
    let slice = (cfg.words_per_topic - cfg.core_words) / cfg.subtopics;
    Ok(ids
        .map(|id| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(id);
            let topic = (id % cfg.topics as u64) as usize;
            let words = &lex.topic_words[topic];
            let core = &words[..cfg.core_words];
            let sub = rng.random_range(0..cfg.subtopics);
            let own = &words[cfg.core_words + sub * slice..cfg.core_words + (sub + 1) * slice];
            let sentences = (0..cfg.sentences_per_document)
                .map(|_| {
                    let len = rng.random_range(cfg.min_sentence_len..=cfg.max_sentence_len);
                    let toks: Vec<&str> = (0..len)
                        .map(|_| {
                            let pool = if rng.random_bool(cfg.concentration) {
                                if core.is_empty() || rng.random_bool(cfg.subtopic_focus) {
                                    own
                                } else {
                                    core
                                }
                            } else {
                                &lex.shared[..]
                            };
                            pool.choose(&mut rng).expect("nonempty lexicon").as_str()
                        })
                        .collect();
                    format!("{}.", toks.join(" "))
                })
                .collect();
            Document { topic, sentences }
        })
        .collect())
}

/// The pre-training corpus: ids `0..documents`.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<Document>> {
    generate_documents(cfg, 0..cfg.documents as u64)
}

pub fn write_jsonl(path: impl AsRef<Path>, docs: &[Document]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for d in docs {
        let line = serde_json::to_string(d).map_err(|e| Error::json("document", e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| Error::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NspLabel {
    IsNext,
    NotNext,
}

impl NspLabel {
    /// Class index in the NSP head output.
    pub fn index(self) -> usize {
        match self {
            NspLabel::IsNext => crate::model::IS_NEXT,
            NspLabel::NotNext => crate::model::NOT_NEXT,
        }
    }
}

/// A sentence pair with the location of both sentences in the corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NspPair {
    pub a: (usize, usize),
    pub b: (usize, usize),
    pub label: NspLabel,
}

impl NspPair {
    pub fn text<'d>(&self, docs: &'d [Document]) -> (&'d str, &'d str) {
        (
            &docs[self.a.0].sentences[self.a.1],
            &docs[self.b.0].sentences[self.b.1],
        )
    }
}

/// Draws one pair: a uniform document and sentence position for A; with
/// probability ½ the next sentence, otherwise a uniform sentence of a
/// uniformly chosen other document.
pub fn draw_pair<R: Rng + ?Sized>(docs: &[Document], rng: &mut R) -> NspPair {
    let d = rng.random_range(0..docs.len());
    let s = rng.random_range(0..docs[d].sentences.len() - 1);
    if rng.random_bool(0.5) {
        NspPair {
            a: (d, s),
            b: (d, s + 1),
            label: NspLabel::IsNext,
        }
    } else {
        let mut o = rng.random_range(0..docs.len() - 1);
        if o >= d {
            o += 1;
        }
        let t = rng.random_range(0..docs[o].sentences.len());
        NspPair {
            a: (d, s),
            b: (o, t),
            label: NspLabel::NotNext,
        }
    }
}

pub fn check_pairable(docs: &[Document]) -> Result<()> {
    if docs.len() < 2 {
        return Err(Error::invalid("NSP sampling needs at least two documents"));
    }
    if let Some(i) = docs.iter().position(|d| d.sentences.len() < 2) {
        return Err(Error::invalid(format!(
            "document {i} has fewer than two sentences"
        )));
    }
    Ok(())
}

pub fn sample_nsp_pairs(docs: &[Document], n: usize, seed: u64) -> Result<Vec<NspPair>> {
    check_pairable(docs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| draw_pair(docs, &mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_do_not_depend_on_the_requested_range() {
        let cfg = CorpusConfig::default();
        let a = generate_documents(&cfg, 0..10).unwrap();
        let b = generate_documents(&cfg, 5..10).unwrap();
        assert_eq!(&a[5..], &b[..]);
    }

    #[test]
    fn topic_words_are_distinct() {
        let cfg = CorpusConfig {
            topics: 30,
            ..CorpusConfig::default()
        };
        let lex = Lexicon::new(&cfg);
        let mut all: Vec<&String> = lex
            .topic_words
            .iter()
            .flatten()
            .chain(&lex.shared)
            .collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
    }
}
