//! Post-LN BERT-style encoder with an MLM head tied to the word embeddings
//! and the NSP pooler head.

use nsp_tensor::{truncated_normal, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::EncodedPair;

pub const INIT_STD: f32 = 0.02;
pub const DEFAULT_MAX_POSITION: usize = 128;

/// Index of the IsNext logit in the NSP head output.
pub const IS_NEXT: usize = 0;
pub const NOT_NEXT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Micro,
    Tiny,
    Small,
    Base,
    Large,
}

impl Preset {
    /// (layers, hidden, heads)
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Preset::Micro => (2, 64, 2),
            Preset::Tiny => (3, 384, 6),
            Preset::Small => (6, 512, 8),
            Preset::Base => (12, 768, 12),
            Preset::Large => (24, 1024, 16),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub type_vocab: usize,
    pub intermediate: usize,
    pub layer_norm_eps: f32,
}

impl EncoderConfig {
    pub fn preset(preset: Preset, vocab_size: usize) -> Self {
        let (layers, hidden, heads) = preset.dims();
        Self {
            layers,
            hidden,
            heads,
            vocab_size,
            max_position: DEFAULT_MAX_POSITION,
            type_vocab: 2,
            intermediate: 4 * hidden,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 {
            return fail("layers, hidden and heads must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.max_position < 16 {
            return fail(format!("max_position {} is below 16", self.max_position));
        }
        if self.type_vocab != 2 {
            return fail(format!("type_vocab must be 2, got {}", self.type_vocab));
        }
        if self.vocab_size < crate::tokenizer::SPECIALS.len() {
            return fail(format!("vocab_size {} is too small", self.vocab_size));
        }
        if self.intermediate == 0 {
            return fail("intermediate size must be positive".into());
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f, v) = (self.hidden, self.intermediate, self.vocab_size);
        let mut specs = vec![
            ("embeddings.word".to_string(), vec![v, h]),
            (
                "embeddings.position".to_string(),
                vec![self.max_position, h],
            ),
            (
                "embeddings.token_type".to_string(),
                vec![self.type_vocab, h],
            ),
            ("embeddings.ln.gain".to_string(), vec![h]),
            ("embeddings.ln.bias".to_string(), vec![h]),
        ];
        for l in 0..self.layers {
            for (name, shape) in [
                ("attn.query.weight", vec![h, h]),
                ("attn.query.bias", vec![h]),
                ("attn.key.weight", vec![h, h]),
                ("attn.key.bias", vec![h]),
                ("attn.value.weight", vec![h, h]),
                ("attn.value.bias", vec![h]),
                ("attn.output.weight", vec![h, h]),
                ("attn.output.bias", vec![h]),
                ("attn.ln.gain", vec![h]),
                ("attn.ln.bias", vec![h]),
                ("ffn.inner.weight", vec![f, h]),
                ("ffn.inner.bias", vec![f]),
                ("ffn.outer.weight", vec![h, f]),
                ("ffn.outer.bias", vec![h]),
                ("ffn.ln.gain", vec![h]),
                ("ffn.ln.bias", vec![h]),
            ] {
                specs.push((format!("layer.{l}.{name}"), shape));
            }
        }
        specs.extend([
            ("pooler.weight".to_string(), vec![h, h]),
            ("pooler.bias".to_string(), vec![h]),
            ("nsp.weight".to_string(), vec![2, h]),
            ("nsp.bias".to_string(), vec![2]),
            ("mlm.transform.weight".to_string(), vec![h, h]),
            ("mlm.transform.bias".to_string(), vec![h]),
            ("mlm.ln.gain".to_string(), vec![h]),
            ("mlm.ln.bias".to_string(), vec![h]),
            ("mlm.output.bias".to_string(), vec![v]),
        ]);
        specs
    }
}

const EMB: usize = 5;
const PER_LAYER: usize = 16;

// Offsets within a layer block.
const Q_W: usize = 0;
const K_W: usize = 2;
const V_W: usize = 4;
const O_W: usize = 6;
const LN1: usize = 8;
const FF1: usize = 10;
const FF2: usize = 12;
const LN2: usize = 14;

// Offsets within the head block.
const POOL: usize = 0;
const NSP: usize = 2;
const MLM_T: usize = 4;
const MLM_LN: usize = 6;
const MLM_BIAS: usize = 8;

/// Rows of padded sequences packed for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub positions: Vec<usize>,
    pub keep: Vec<bool>,
    pub size: usize,
    pub seq: usize,
}

impl Batch {
    /// Packs pairs, trimming trailing columns that are padding in every row.
    pub fn new(pairs: &[&EncodedPair]) -> Result<Self> {
        let seq = pairs.iter().map(|p| p.used_len()).max().unwrap_or(0);
        Self::with_len(pairs, seq)
    }

    /// Packs pairs at their full padded length.
    pub fn untrimmed(pairs: &[&EncodedPair]) -> Result<Self> {
        let seq = pairs.iter().map(|p| p.len()).max().unwrap_or(0);
        Self::with_len(pairs, seq)
    }

    fn with_len(pairs: &[&EncodedPair], seq: usize) -> Result<Self> {
        if pairs.is_empty() || seq == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let n = pairs.len() * seq;
        let mut b = Batch {
            ids: Vec::with_capacity(n),
            segments: Vec::with_capacity(n),
            positions: Vec::with_capacity(n),
            keep: Vec::with_capacity(n),
            size: pairs.len(),
            seq,
        };
        for p in pairs {
            for j in 0..seq {
                let real = j < p.len();
                b.ids.push(if real {
                    p.ids[j]
                } else {
                    crate::tokenizer::PAD_ID
                });
                b.segments
                    .push(if real { p.segments[j] as usize } else { 0 });
                b.keep.push(real && p.attention[j] == 1);
                b.positions.push(j);
            }
        }
        Ok(b)
    }

    /// Flat row index of the `[CLS]` token of every sequence.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.size).map(|b| b * self.seq).collect()
    }
}

/// Parameters placed on a tape, in [`EncoderConfig::param_specs`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    layers: usize,
}

impl Bound {
    fn layer(&self, l: usize, k: usize) -> Var {
        self.vars[EMB + l * PER_LAYER + k]
    }

    fn head(&self, k: usize) -> Var {
        self.vars[EMB + self.layers * PER_LAYER + k]
    }

    pub fn word_embeddings(&self) -> Var {
        self.vars[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: Vec<Tensor>,
}

impl EncoderModel {
    /// Fresh weights: truncated normal (std 0.02) matrices and embeddings,
    /// unit layer-norm gains, zero biases.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with(".gain") {
                    Tensor::ones(&shape)
                } else if shape.len() == 2 {
                    truncated_normal(&shape, INIT_STD, &mut rng)
                } else {
                    Tensor::zeros(&shape)
                };
                t.trainable()
            })
            .collect();
        Ok(Self { config, params })
    }

    /// Assembles a model from tensors in spec order, checking every shape.
    pub fn from_params(config: EncoderConfig, params: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in specs.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let params = params.into_iter().map(|t| t.trainable()).collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> Vec<String> {
        self.config
            .param_specs()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.config
            .param_specs()
            .iter()
            .position(|(n, _)| n == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Index range of the pooler and NSP head tensors.
    pub fn nsp_head_range(&self) -> std::ops::Range<usize> {
        let start = EMB + self.config.layers * PER_LAYER + POOL;
        start..start + 4
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, |tape, _, t| tape.leaf(t))
    }

    /// Places every parameter on the tape through `leaf`, which receives
    /// the parameter index and tensor.
    pub fn bind_with<T: Real>(
        &self,
        tape: &mut Tape<T>,
        mut leaf: impl FnMut(&mut Tape<T>, usize, &Tensor) -> Var,
    ) -> Bound {
        let vars = self
            .params
            .iter()
            .enumerate()
            .map(|(i, t)| leaf(tape, i, t))
            .collect();
        Bound {
            vars,
            layers: self.config.layers,
        }
    }

    /// Final hidden states, `[batch·seq, hidden]`.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, batch: &Batch) -> Result<Var> {
        let c = &self.config;
        if batch.seq > c.max_position {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_position {}",
                batch.seq, c.max_position
            )));
        }
        let eps = c.layer_norm_eps;
        let w = tape.gather_rows(p.vars[0], &batch.ids)?;
        let pos = tape.gather_rows(p.vars[1], &batch.positions)?;
        let ty = tape.gather_rows(p.vars[2], &batch.segments)?;
        let x = tape.add(w, pos)?;
        let x = tape.add(x, ty)?;
        let mut x = tape.layer_norm(x, p.vars[3], p.vars[4], eps)?;
        for l in 0..c.layers {
            let lin = |tape: &mut Tape<T>, x: Var, k: usize| {
                tape.linear(x, p.layer(l, k), Some(p.layer(l, k + 1)))
            };
            let q = lin(tape, x, Q_W)?;
            let k = lin(tape, x, K_W)?;
            let v = lin(tape, x, V_W)?;
            let a = tape.attention(q, k, v, batch.size, batch.seq, c.heads, &batch.keep)?;
            let o = lin(tape, a, O_W)?;
            let r = tape.add(x, o)?;
            x = tape.layer_norm(r, p.layer(l, LN1), p.layer(l, LN1 + 1), eps)?;
            let f = lin(tape, x, FF1)?;
            let f = tape.gelu(f);
            let f = lin(tape, f, FF2)?;
            let r = tape.add(x, f)?;
            x = tape.layer_norm(r, p.layer(l, LN2), p.layer(l, LN2 + 1), eps)?;
        }
        Ok(x)
    }

    /// `[batch, hidden]` rows of the `[CLS]` positions.
    pub fn cls_hidden<T: Real>(
        &self,
        tape: &mut Tape<T>,
        hidden: Var,
        batch: &Batch,
    ) -> Result<Var> {
        Ok(tape.gather_rows(hidden, &batch.cls_rows())?)
    }

    /// `W_nsp · tanh(W · h_CLS + b) + b_nsp`, shape `[batch, 2]` ordered
    /// (IsNext, NotNext).
    pub fn nsp_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        hidden: Var,
        batch: &Batch,
    ) -> Result<Var> {
        let cls = self.cls_hidden(tape, hidden, batch)?;
        let pooled = tape.linear(cls, p.head(POOL), Some(p.head(POOL + 1)))?;
        let pooled = tape.tanh(pooled);
        Ok(tape.linear(pooled, p.head(NSP), Some(p.head(NSP + 1)))?)
    }

    /// Vocabulary logits at the given flat rows of `hidden`, `[rows, vocab]`.
    pub fn mlm_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        hidden: Var,
        rows: &[usize],
    ) -> Result<Var> {
        let h = tape.gather_rows(hidden, rows)?;
        let h = tape.linear(h, p.head(MLM_T), Some(p.head(MLM_T + 1)))?;
        let h = tape.gelu(h);
        let h = tape.layer_norm(
            h,
            p.head(MLM_LN),
            p.head(MLM_LN + 1),
            self.config.layer_norm_eps,
        )?;
        let logits = tape.matmul_t(h, p.word_embeddings())?;
        Ok(tape.add_bias(logits, p.head(MLM_BIAS))?)
    }

    /// Hidden states of one pair at its full padded length, `[len, hidden]`.
    pub fn hidden_states(&self, pair: &EncodedPair) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let p = self.bind(&mut tape);
        let batch = Batch::untrimmed(&[pair])?;
        let h = self.encode(&mut tape, &p, &batch)?;
        Ok(tape.to_tensor(h))
    }

    /// (IsNext, NotNext) probabilities for every pair, evaluated in chunks.
    pub fn nsp_probs(&self, pairs: &[EncodedPair]) -> Result<Vec<[f32; 2]>> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(pairs.len());
        for chunk in pairs.chunks(CHUNK) {
            let refs: Vec<&EncodedPair> = chunk.iter().collect();
            let batch = Batch::new(&refs)?;
            let mut tape = Tape::<f32>::new();
            let p = self.bind(&mut tape);
            let h = self.encode(&mut tape, &p, &batch)?;
            let logits = self.nsp_logits(&mut tape, &p, h, &batch)?;
            let probs = tape.softmax_rows(logits)?;
            out.extend(tape.value(probs).chunks(2).map(|r| [r[0], r[1]]));
        }
        Ok(out)
    }

    pub fn nsp_prob_isnext(&self, pair: &EncodedPair) -> Result<f32> {
        Ok(self.nsp_probs(std::slice::from_ref(pair))?[0][IS_NEXT])
    }

    /// Vocabulary distribution at every recorded mask position of `pair`,
    /// in position order.
    pub fn mlm_distributions(&self, pair: &EncodedPair) -> Result<Vec<Vec<f32>>> {
        if pair.mask_positions.is_empty() {
            return Err(Error::invalid("pair has no mask positions"));
        }
        let mut tape = Tape::<f32>::new();
        let p = self.bind(&mut tape);
        let batch = Batch::new(&[pair])?;
        let h = self.encode(&mut tape, &p, &batch)?;
        let logits = self.mlm_logits(&mut tape, &p, h, &pair.mask_positions)?;
        let probs = tape.softmax_rows(logits)?;
        Ok(tape
            .value(probs)
            .chunks(self.config.vocab_size)
            .map(<[f32]>::to_vec)
            .collect())
    }

    /// Probability of `token_id` at a recorded mask position.
    pub fn mlm_token_prob(
        &self,
        pair: &EncodedPair,
        position: usize,
        token_id: usize,
    ) -> Result<f32> {
        let slot = pair
            .mask_positions
            .iter()
            .position(|&p| p == position)
            .ok_or_else(|| Error::invalid(format!("position {position} is not masked")))?;
        if token_id >= self.config.vocab_size {
            return Err(Error::invalid(format!("token id {token_id} out of range")));
        }
        Ok(self.mlm_distributions(pair)?[slot][token_id])
    }
}
