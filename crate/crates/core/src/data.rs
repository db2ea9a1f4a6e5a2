//! Labeled examples, JSONL loading and K-shot sampling.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompting::{TaskConfig, TaskType};

/// Seeds of the default five-run suite.
pub const DEFAULT_SEEDS: [u64; 5] = [13, 21, 42, 87, 100];

/// Development examples per class, as a multiple of K.
pub const DEV_MULTIPLIER: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    #[serde(default)]
    pub id: String,
    pub text_a: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mention: Option<String>,
    /// Per-example candidate descriptions keyed by label, overriding the
    /// task verbalizer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<IndexMap<String, String>>,
    pub label: String,
}

impl Example {
    pub fn single(
        id: impl Into<String>,
        text: impl Into<String>,
        label: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            text_a: text.into(),
            text_b: None,
            mention: None,
            candidates: None,
            label: label.into(),
        }
    }

    pub fn pair(
        id: impl Into<String>,
        a: impl Into<String>,
        b: impl Into<String>,
        label: impl Into<String>,
    ) -> Self {
        Self {
            text_b: Some(b.into()),
            ..Self::single(id, a, label)
        }
    }

    /// Checks the example against a task's label set and shape.
    pub fn validate(&self, task: &TaskConfig) -> Result<()> {
        let labels: Vec<&str> = match &self.candidates {
            Some(c) => c.keys().map(String::as_str).collect(),
            None => task.labels(),
        };
        if !labels.contains(&self.label.as_str()) {
            return Err(Error::UnknownLabel(self.label.clone()));
        }
        match task.task_type {
            TaskType::Pair if self.text_b.is_none() => Err(Error::invalid(format!(
                "example {}: pair task needs text_b",
                self.id
            ))),
            TaskType::TwoStage if self.mention.as_deref().is_none_or(|m| m.trim().is_empty()) => {
                Err(Error::invalid(format!(
                    "example {}: two-stage task needs a mention",
                    self.id
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Reads and validates one example per line. Missing ids become the
/// 1-based line number.
pub fn load_jsonl(path: impl AsRef<Path>, task: &TaskConfig) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text, task)
}

pub fn parse_jsonl(text: &str, task: &TaskConfig) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let at = |message: String| Error::Line {
            line: line_no,
            message,
        };
        let mut ex: Example = serde_json::from_str(line).map_err(|e| at(e.to_string()))?;
        if ex.id.is_empty() {
            ex.id = line_no.to_string();
        }
        ex.validate(task).map_err(|e| at(e.to_string()))?;
        if !ids.insert(ex.id.clone()) {
            return Err(at(format!("duplicate id {:?}", ex.id)));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for ex in examples {
        text.push_str(&serde_json::to_string(ex).map_err(|e| Error::json("example", e))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KShotSplit {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub seed: u64,
}

/// Samples K training and 10·K development examples per label, without
/// replacement, from `pool`. Labels are taken in `labels` order.
pub fn kshot_split(pool: &[Example], labels: &[&str], k: usize, seed: u64) -> Result<KShotSplit> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    let need = k * (1 + DEV_MULTIPLIER);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(k * labels.len());
    let mut dev = Vec::with_capacity(k * DEV_MULTIPLIER * labels.len());
    for label in labels {
        let mut members: Vec<&Example> = pool.iter().filter(|e| e.label == *label).collect();
        if members.len() < need {
            return Err(Error::invalid(format!(
                "label {label:?} has {} examples, K={k} needs {need}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        train.extend(members[..k].iter().map(|&e| e.clone()));
        dev.extend(members[k..need].iter().map(|&e| e.clone()));
    }
    Ok(KShotSplit { train, dev, seed })
}
