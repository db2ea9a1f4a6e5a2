//! Templates and verbalizers that turn a sample and a candidate label into a
//! sentence pair for the NSP head.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{EncodedPair, Vocab};

pub const LABEL_SLOT: &str = "{label}";
pub const TEXT_SLOT: &str = "{text}";
pub const MENTION_SLOT: &str = "{mention}";
pub const DESCRIPTION_SLOT: &str = "{description}";

/// Which sentence slot holds the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    /// Prompt first, sample text second.
    Prefix,
    /// Sample text first, prompt second.
    #[default]
    Suffix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub pattern: String,
    #[serde(default)]
    pub position: Position,
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>, position: Position) -> Result<Self> {
        let t = Self {
            pattern: pattern.into(),
            position,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.pattern.matches(LABEL_SLOT).count();
        if n != 1 {
            return Err(Error::invalid(format!(
                "template {:?} must contain {LABEL_SLOT} exactly once, found {n}",
                self.pattern
            )));
        }
        if self.pattern.contains(TEXT_SLOT) {
            return Err(Error::invalid(format!(
                "template {:?} must not contain {TEXT_SLOT}",
                self.pattern
            )));
        }
        Ok(())
    }

    /// Pattern text before and after the label slot.
    pub fn split(&self) -> (&str, &str) {
        self.pattern
            .split_once(LABEL_SLOT)
            .expect("validated template has a label slot")
    }

    pub fn fill(&self, phrase: &str) -> String {
        self.pattern.replacen(LABEL_SLOT, phrase, 1)
    }
}

/// Label → phrase map. Iteration follows declaration order, which is also
/// the label index order everywhere else.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(
    try_from = "IndexMap<String, String>",
    into = "IndexMap<String, String>"
)]
pub struct Verbalizer {
    map: IndexMap<String, String>,
}

impl Verbalizer {
    pub fn new(map: IndexMap<String, String>) -> Result<Self> {
        if map.is_empty() {
            return Err(Error::invalid("verbalizer has no labels"));
        }
        let mut seen = std::collections::HashSet::new();
        for (label, phrase) in &map {
            if phrase.trim().is_empty() {
                return Err(Error::invalid(format!(
                    "label {label:?} has an empty phrase"
                )));
            }
            if !seen.insert(phrase.as_str()) {
                return Err(Error::invalid(format!(
                    "phrase {phrase:?} is used by more than one label"
                )));
            }
        }
        Ok(Self { map })
    }

    pub fn from_pairs<L: Into<String>, P: Into<String>>(
        pairs: impl IntoIterator<Item = (L, P)>,
    ) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .map(|(l, p)| (l.into(), p.into()))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.map.get_index(index).map(|(l, _)| l.as_str())
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.map
            .get_index_of(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn phrase(&self, label: &str) -> Result<&str> {
        self.map
            .get(label)
            .map(String::as_str)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    pub fn phrase_at(&self, index: usize) -> Option<&str> {
        self.map.get_index(index).map(|(_, p)| p.as_str())
    }
}

impl TryFrom<IndexMap<String, String>> for Verbalizer {
    type Error = Error;
    fn try_from(map: IndexMap<String, String>) -> Result<Self> {
        Self::new(map)
    }
}

impl From<Verbalizer> for IndexMap<String, String> {
    fn from(v: Verbalizer) -> Self {
        v.map
    }
}

/// Sentence A and sentence B for one candidate label.
pub fn render_single(
    x: &str,
    t: &PromptTemplate,
    v: &Verbalizer,
    label: &str,
) -> Result<(String, String)> {
    let prompt = t.fill(v.phrase(label)?);
    Ok(match t.position {
        Position::Suffix => (x.to_string(), prompt),
        Position::Prefix => (prompt, x.to_string()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairOrder {
    #[default]
    Original,
    Reversed,
}

pub fn render_pair(x1: &str, x2: &str, order: PairOrder) -> (String, String) {
    match order {
        PairOrder::Original => (x1.to_string(), x2.to_string()),
        PairOrder::Reversed => (x2.to_string(), x1.to_string()),
    }
}

/// A first stage that restates the mention at the end of sentence A and a
/// second stage that carries a candidate description as sentence B.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TwoStagePrompt {
    pub stage1: String,
    pub stage2: String,
}

impl TwoStagePrompt {
    pub fn validate(&self) -> Result<()> {
        if !self.stage1.contains(MENTION_SLOT) {
            return Err(Error::invalid(format!(
                "stage1 {:?} must contain {MENTION_SLOT}",
                self.stage1
            )));
        }
        if !self.stage2.contains(DESCRIPTION_SLOT) {
            return Err(Error::invalid(format!(
                "stage2 {:?} must contain {DESCRIPTION_SLOT}",
                self.stage2
            )));
        }
        Ok(())
    }
}

/// Sentence A is the text followed by ", " and the filled first stage
/// (or the first stage alone when it places `{text}` itself); sentence B is
/// the filled second stage.
pub fn render_two_stage(
    x: &str,
    mention: &str,
    description: &str,
    p: &TwoStagePrompt,
) -> Result<(String, String)> {
    if mention.trim().is_empty() {
        return Err(Error::invalid("two-stage prompt needs a nonempty mention"));
    }
    let stage1 = p.stage1.replace(MENTION_SLOT, mention);
    let a = if stage1.contains(TEXT_SLOT) {
        stage1.replace(TEXT_SLOT, x)
    } else {
        format!("{x}, {stage1}")
    };
    Ok((a, p.stage2.replace(DESCRIPTION_SLOT, description)))
}

/// Encodes a sample next to a prompt. When the pair is too long the sample
/// text loses tokens from its end, whichever slot it occupies; the prompt
/// is never cut.
pub fn encode_prompted(
    x_ids: &[usize],
    prompt_ids: &[usize],
    position: Position,
    max_len: usize,
) -> Result<EncodedPair> {
    if max_len < 8 || prompt_ids.len() + 4 > max_len {
        return Err(Error::invalid(format!(
            "prompt of {} tokens does not fit in {max_len}",
            prompt_ids.len()
        )));
    }
    let keep = x_ids.len().min(max_len - 3 - prompt_ids.len());
    let x = &x_ids[..keep];
    match position {
        Position::Suffix => EncodedPair::from_ids(x, prompt_ids, max_len),
        Position::Prefix => {
            if x.is_empty() {
                return Err(Error::invalid("sample text encodes to no tokens"));
            }
            EncodedPair::from_ids(prompt_ids, x, max_len)
        }
    }
}

/// Masked-LM input for one label: the prompt with the label span replaced
/// by `[MASK]` tokens, and the label's token ids as scoring targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PetInput {
    pub pair: EncodedPair,
    pub targets: Vec<usize>,
}

/// Builds the masked input for `label`. The label slot is treated as a
/// word boundary: the pattern text around it and the phrase are tokenized
/// separately.
pub fn render_pet(
    vocab: &Vocab,
    x: &str,
    t: &PromptTemplate,
    v: &Verbalizer,
    label: &str,
    max_len: usize,
) -> Result<PetInput> {
    let targets = vocab.encode(v.phrase(label)?);
    if targets.is_empty() {
        return Err(Error::invalid(format!(
            "label {label:?} tokenizes to nothing"
        )));
    }
    let (before, after) = t.split();
    let before = vocab.encode(before);
    let mut prompt = before.clone();
    prompt.extend_from_slice(&targets);
    prompt.extend(vocab.encode(after));
    let x_ids = vocab.encode(x);
    let mut pair = encode_prompted(&x_ids, &prompt, t.position, max_len)?;
    let prompt_start = match t.position {
        Position::Prefix => 1,
        Position::Suffix => {
            let first_sep = pair
                .ids
                .iter()
                .position(|&id| id == crate::tokenizer::SEP_ID)
                .expect("encoded pair has a separator");
            first_sep + 1
        }
    };
    pair.insert_masks(prompt_start + before.len(), targets.len())?;
    Ok(PetInput { pair, targets })
}

/// What the sample slots of a task hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    /// One text plus a templated label prompt.
    Single,
    /// Two texts scored as an NSP pair.
    Pair,
    /// Text with a mention, scored against candidate descriptions.
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    CandidatesContrast,
    SamplesContrast,
    Thresholds,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortOrder {
    #[default]
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingSpec {
    pub strategy: Strategy,
    #[serde(default)]
    pub order: SortOrder,
    #[serde(default)]
    pub batch_size: Option<usize>,
}

/// Task config file contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task_type: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<PromptTemplate>,
    pub verbalizer: Verbalizer,
    pub mapping: MappingSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_stage: Option<TwoStagePrompt>,
    #[serde(default)]
    pub pair_order: PairOrder,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_max_len() -> usize {
    64
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        match self.task_type {
            TaskType::Single => match &self.template {
                Some(t) => t.validate()?,
                None => return Err(Error::invalid("single-sentence task needs a template")),
            },
            TaskType::Pair => {
                if self.mapping.strategy == Strategy::CandidatesContrast {
                    return Err(Error::invalid(
                        "sentence-pair tasks map answers by samples-contrast or thresholds",
                    ));
                }
            }
            TaskType::TwoStage => match &self.two_stage {
                Some(p) => p.validate()?,
                None => return Err(Error::invalid("two-stage task needs a two_stage prompt")),
            },
        }
        if self.verbalizer.len() < 2 {
            return Err(Error::invalid("a task needs at least two labels"));
        }
        if self.mapping.batch_size == Some(0) {
            return Err(Error::invalid("mapping batch size must be positive"));
        }
        if self.max_len < 8 {
            return Err(Error::invalid("max_len must be at least 8"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::json("task config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::json("task config", e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn labels(&self) -> Vec<&str> {
        self.verbalizer.labels().collect()
    }
}
