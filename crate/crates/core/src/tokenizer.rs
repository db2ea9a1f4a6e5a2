//! WordPiece tokenization and the `[CLS] A [SEP] B [SEP]` pair layout.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Template spelling of the terminal separator; encodes as `[SEP]`.
pub const EOS_ALIAS: &str = "[EOS]";

const MAX_WORD_CHARS: usize = 100;

/// Lowercases, splits on whitespace and splits every punctuation character
/// into its own token. Bracketed special tokens survive intact, with
/// `[EOS]` rewritten to `[SEP]`.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut rest = word;
        let mut current = String::new();
        while let Some(c) = rest.chars().next() {
            if c == '[' {
                if let Some(special) = leading_special(rest) {
                    if !current.is_empty() {
                        out.push(std::mem::take(&mut current));
                    }
                    let canon = if special.eq_ignore_ascii_case(EOS_ALIAS) {
                        SEP
                    } else {
                        SPECIALS
                            .iter()
                            .find(|s| s.eq_ignore_ascii_case(special))
                            .copied()
                            .unwrap_or(SEP)
                    };
                    out.push(canon.to_string());
                    rest = &rest[special.len()..];
                    continue;
                }
            }
            if c.is_alphanumeric() {
                current.extend(c.to_lowercase());
            } else {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(c.to_lowercase().collect());
            }
            rest = &rest[c.len_utf8()..];
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

fn leading_special(s: &str) -> Option<&str> {
    SPECIALS
        .iter()
        .chain(std::iter::once(&EOS_ALIAS))
        .find(|sp| {
            s.as_bytes()
                .get(..sp.len())
                .is_some_and(|b| b.eq_ignore_ascii_case(sp.as_bytes()))
        })
        .map(|sp| &s[..sp.len()])
}

/// Token inventory. Ids are dense and the five special tokens take ids 0–4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from an explicit token list, which must start
    /// with the special tokens in their canonical order.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::invalid(format!(
                "vocabulary must begin with {SPECIALS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::invalid(format!("empty token at id {i}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Frequency-ordered vocabulary over pre-tokenized words. Ties are
    /// broken lexicographically; `max_size` counts the special tokens.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        max_size: usize,
        min_freq: usize,
    ) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_text = false;
        for line in corpus {
            for w in pre_tokenize(line) {
                seen_text = true;
                if !SPECIALS.contains(&w.as_str()) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        if !seen_text {
            return Err(Error::invalid(
                "cannot build a vocabulary from an empty corpus",
            ));
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(SPECIALS.len());
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().take(room).map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// Greedy longest-match WordPiece split of one pre-tokenized word.
    fn word_pieces(&self, word: &str, out: &mut Vec<usize>) {
        if let Some(id) = self.id(word) {
            out.push(id);
            return;
        }
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        if chars.len() > MAX_WORD_CHARS {
            out.push(UNK_ID);
            return;
        }
        let mark = out.len();
        let mut start = 0;
        let mut piece = String::new();
        while start < chars.len() {
            let mut found = None;
            let mut end = chars.len();
            while end > start {
                let lo = chars[start].0;
                let hi = chars.get(end).map_or(word.len(), |c| c.0);
                piece.clear();
                if start > 0 {
                    piece.push_str("##");
                }
                piece.push_str(&word[lo..hi]);
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    out.push(id);
                    start = end;
                }
                None => {
                    out.truncate(mark);
                    out.push(UNK_ID);
                    return;
                }
            }
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for w in pre_tokenize(text) {
            self.word_pieces(&w, &mut out);
        }
        out
    }

    /// Joins tokens with single spaces, gluing `##` continuations onto the
    /// previous token. Padding is dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == PAD_ID {
                continue;
            }
            let tok = self.token(id).unwrap_or(UNK);
            match tok.strip_prefix("##") {
                Some(cont) if !out.is_empty() => out.push_str(cont),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(tok);
                }
            }
        }
        out
    }

    /// Encodes `[CLS] a [SEP] b [SEP]` padded to `max_len`.
    pub fn encode_pair(&self, a: &str, b: &str, max_len: usize) -> Result<EncodedPair> {
        EncodedPair::from_ids(&self.encode(a), &self.encode(b), max_len)
    }
}

/// A padded `[CLS] A [SEP] B [SEP]` sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub ids: Vec<usize>,
    /// 0 through the first `[SEP]`, 1 afterwards.
    pub segments: Vec<u8>,
    /// 1 on real tokens, 0 on padding.
    pub attention: Vec<u8>,
    /// Positions replaced by `[MASK]`, in sequence order.
    pub mask_positions: Vec<usize>,
}

impl EncodedPair {
    /// Lays out pre-encoded sentences. Sentence A loses tokens from its end
    /// when the pair does not fit; sentence B is never cut.
    pub fn from_ids(a: &[usize], b: &[usize], max_len: usize) -> Result<Self> {
        if max_len < 8 {
            return Err(Error::invalid(format!("max_len {max_len} is below 8")));
        }
        if b.is_empty() {
            return Err(Error::invalid("second sentence encodes to no tokens"));
        }
        if b.len() > max_len - 4 {
            return Err(Error::invalid(format!(
                "second sentence has {} tokens, budget is {}",
                b.len(),
                max_len - 4
            )));
        }
        let keep_a = a.len().min(max_len - 3 - b.len());
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend_from_slice(&a[..keep_a]);
        ids.push(SEP_ID);
        let seg0 = ids.len();
        ids.extend_from_slice(b);
        ids.push(SEP_ID);
        let used = ids.len();
        ids.resize(max_len, PAD_ID);
        let segments = (0..max_len)
            .map(|i| u8::from(i >= seg0 && i < used))
            .collect();
        let attention = (0..max_len).map(|i| u8::from(i < used)).collect();
        Ok(Self {
            ids,
            segments,
            attention,
            mask_positions: Vec::new(),
        })
    }

    /// Lays out one sentence as `[CLS] a [SEP]`, cutting `a` from its end.
    pub fn single(a: &[usize], max_len: usize) -> Result<Self> {
        if max_len < 8 {
            return Err(Error::invalid(format!("max_len {max_len} is below 8")));
        }
        let keep = a.len().min(max_len - 2);
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS_ID);
        ids.extend_from_slice(&a[..keep]);
        ids.push(SEP_ID);
        let used = ids.len();
        ids.resize(max_len, PAD_ID);
        Ok(Self {
            ids,
            segments: vec![0; max_len],
            attention: (0..max_len).map(|i| u8::from(i < used)).collect(),
            mask_positions: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-padding positions.
    pub fn used_len(&self) -> usize {
        self.attention.iter().filter(|&&a| a == 1).count()
    }

    /// Replaces `span_len` tokens starting at `span_start` with `[MASK]`
    /// and records their positions. Returns the replaced ids in order.
    pub fn insert_masks(&mut self, span_start: usize, span_len: usize) -> Result<Vec<usize>> {
        if span_len == 0 {
            return Err(Error::invalid("mask span is empty"));
        }
        let end = span_start + span_len;
        if end > self.used_len() {
            return Err(Error::invalid(format!(
                "mask span {span_start}..{end} exceeds sequence of {} tokens",
                self.used_len()
            )));
        }
        if let Some(p) = (span_start..end).find(|&p| Vocab::is_special(self.ids[p])) {
            return Err(Error::invalid(format!(
                "mask span covers special token at position {p}"
            )));
        }
        let original = self.ids[span_start..end].to_vec();
        for p in span_start..end {
            self.ids[p] = MASK_ID;
            self.mask_positions.push(p);
        }
        self.mask_positions.sort_unstable();
        Ok(original)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(words: &[&str]) -> Vocab {
        Vocab::from_tokens(
            SPECIALS
                .iter()
                .chain(words)
                .map(|s| s.to_string())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pre_tokenize_splits_punctuation_and_keeps_specials() {
        assert_eq!(pre_tokenize("It was GREAT."), ["it", "was", "great", "."]);
        assert_eq!(
            pre_tokenize("a [eos] b[MASK]"),
            ["a", "[SEP]", "b", "[MASK]"]
        );
        assert_eq!(
            pre_tokenize("Business & Finance"),
            ["business", "&", "finance"]
        );
    }

    #[test]
    fn wordpiece_prefers_longest_match() {
        let v = vocab(&["un", "##aff", "##able", "##a", "aff"]);
        let ids = v.encode("unaffable");
        let toks: Vec<_> = ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, ["un", "##aff", "##able"]);
        assert_eq!(v.decode(&ids), "unaffable");
    }

    #[test]
    fn unsplittable_word_is_one_unknown() {
        let v = vocab(&["un", "##aff"]);
        assert_eq!(v.encode("unaffxyz"), [UNK_ID]);
    }

    #[test]
    fn segment_blocks() {
        let v = vocab(&["x", "y", "p", "q"]);
        let p = v.encode_pair("x y", "p q", 12).unwrap();
        assert_eq!(&p.segments[..8], &[0, 0, 0, 0, 1, 1, 1, 0]);
        assert_eq!(p.used_len(), 7);
    }
}
