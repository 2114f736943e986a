//! Whitespace/punctuation tokenizer and the shared transformer encoder.

mod vocab;

use serde::{Deserialize, Serialize};

pub use crate::nncore::Pooling;
use crate::error::{Error, Result};
use crate::nncore::{Initializer, ParamId, ParamRegistry, Tape, Var, LAYER_NORM_EPS};
pub use vocab::{pre_tokenize, Vocabulary, CLS, PAD, SEP, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_hidden: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub pooling: Pooling,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_hidden: 256,
            max_len: 128,
            dropout: 0.1,
            activation: Activation::Gelu,
            pooling: Pooling::Mean,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.num_heads == 0 || self.d_model % self.num_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.ffn_hidden == 0 {
            return fail("ffn_hidden must be positive".into());
        }
        if self.max_len < 2 {
            return fail("max_len must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Token ids, segment ids and attention mask; real tokens form a prefix
/// of the mask. Segment 1 marks the topic half of a pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub mask: Vec<bool>,
    pub max_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, max_len: usize) -> Self {
        let mask = vec![true; ids.len()];
        let segments = vec![0; ids.len()];
        Self {
            ids,
            segments,
            mask,
            max_len,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary, add_cls: bool, max_len: usize) -> TokenSequence {
    let mut ids = Vec::new();
    if add_cls {
        ids.push(CLS);
    }
    ids.extend(pre_tokenize(text).iter().map(|t| vocab.id(t)));
    ids.truncate(max_len);
    TokenSequence::new(ids, max_len)
}

/// `[CLS] text [SEP] topic [SEP]`, trimming the text first and the topic
/// only if it alone does not fit.
pub fn tokenize_pair(text: &str, topic: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    let mut text_ids: Vec<u32> = pre_tokenize(text).iter().map(|t| vocab.id(t)).collect();
    let mut topic_ids: Vec<u32> = pre_tokenize(topic).iter().map(|t| vocab.id(t)).collect();
    let budget = max_len.saturating_sub(3);
    topic_ids.truncate(budget);
    text_ids.truncate(budget - topic_ids.len());
    let mut ids = Vec::with_capacity(text_ids.len() + topic_ids.len() + 3);
    ids.push(CLS);
    ids.extend(text_ids);
    ids.push(SEP);
    let first = ids.len();
    ids.extend(topic_ids);
    ids.push(SEP);
    ids.truncate(max_len);
    let mut seq = TokenSequence::new(ids, max_len);
    for s in seq.segments.iter_mut().skip(first) {
        *s = 1;
    }
    seq
}

/// Sequences stacked row-wise and padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub mask: Vec<bool>,
    pub batch: usize,
    pub seq_len: usize,
}

impl PaddedBatch {
    /// Pads to the longest sequence in the batch.
    pub fn dynamic(seqs: &[&TokenSequence]) -> Result<Self> {
        let seq_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        Self::to_length(seqs, seq_len)
    }

    pub fn to_length(seqs: &[&TokenSequence], seq_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("cannot pad an empty batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        let mut segments = Vec::with_capacity(seqs.len() * seq_len);
        let mut mask = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            if s.len() > seq_len {
                return Err(Error::Length {
                    len: s.len(),
                    max: seq_len,
                });
            }
            ids.extend_from_slice(&s.ids);
            segments.extend_from_slice(&s.segments);
            mask.extend_from_slice(&s.mask);
            ids.resize(ids.len() + seq_len - s.len(), PAD);
            segments.resize(segments.len() + seq_len - s.len(), 0);
            mask.resize(mask.len() + seq_len - s.len(), false);
        }
        Ok(Self {
            ids,
            segments,
            mask,
            batch: seqs.len(),
            seq_len,
        })
    }
}

#[derive(Clone, Debug)]
struct LayerParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Handles to the encoder weights inside a [`ParamRegistry`].
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    tok_emb: ParamId,
    pos_emb: ParamId,
    seg_emb: ParamId,
    emb_ln_g: ParamId,
    emb_ln_b: ParamId,
    layers: Vec<LayerParams>,
}

impl EncoderParams {
    /// Registers freshly initialised weights under `prefix`.
    pub fn register(
        reg: &mut ParamRegistry,
        init: &mut Initializer,
        prefix: &str,
        config: &EncoderConfig,
        vocab_size: usize,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.ffn_hidden;
        let mut w = |name: String, shape: &[usize]| reg_weight(reg, init, name, shape);
        let tok_emb = w(format!("{prefix}.tok_emb"), &[vocab_size, d])?;
        let pos_emb = w(format!("{prefix}.pos_emb"), &[config.max_len, d])?;
        let seg_emb = w(format!("{prefix}.seg_emb"), &[2, d])?;
        let emb_ln_g = reg.register(format!("{prefix}.emb_ln.gain"), init.gain(d), true)?;
        let emb_ln_b = reg.register(format!("{prefix}.emb_ln.bias"), init.bias(d), true)?;
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let p = format!("{prefix}.layer{l}");
            let mut weight = |n: &str, shape: &[usize]| reg_weight(reg, init, format!("{p}.{n}"), shape);
            let wq = weight("attn.wq", &[d, d])?;
            let wk = weight("attn.wk", &[d, d])?;
            let wv = weight("attn.wv", &[d, d])?;
            let wo = weight("attn.wo", &[d, d])?;
            let w1 = weight("ffn.w1", &[d, h])?;
            let w2 = weight("ffn.w2", &[h, d])?;
            let mut bias = |n: &str, len: usize| reg.register(format!("{p}.{n}"), init.bias(len), true);
            let bq = bias("attn.bq", d)?;
            let bk = bias("attn.bk", d)?;
            let bv = bias("attn.bv", d)?;
            let bo = bias("attn.bo", d)?;
            let b1 = bias("ffn.b1", h)?;
            let b2 = bias("ffn.b2", d)?;
            let ln1_b = bias("ln1.bias", d)?;
            let ln2_b = bias("ln2.bias", d)?;
            let ln1_g = reg.register(format!("{p}.ln1.gain"), init.gain(d), true)?;
            let ln2_g = reg.register(format!("{p}.ln2.gain"), init.gain(d), true)?;
            layers.push(LayerParams {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_g,
                ln1_b,
                w1,
                b1,
                w2,
                b2,
                ln2_g,
                ln2_b,
            });
        }
        Ok(Self {
            config: config.clone(),
            vocab_size,
            tok_emb,
            pos_emb,
            seg_emb,
            emb_ln_g,
            emb_ln_b,
            layers,
        })
    }

    /// Re-attaches to weights already present in `reg` (e.g. after loading
    /// a checkpoint).
    pub fn attach(reg: &ParamRegistry, prefix: &str, config: &EncoderConfig, vocab_size: usize) -> Result<Self> {
        let mut scratch = ParamRegistry::new();
        let mut init = Initializer::new(0);
        let shadow = Self::register(&mut scratch, &mut init, prefix, config, vocab_size)?;
        let find = |id: ParamId| -> Result<ParamId> {
            let name = scratch.name(id);
            let found = reg
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if reg.tensor(found).shape() != scratch.tensor(id).shape() {
                return Err(Error::Checkpoint(format!("parameter {name} has the wrong shape")));
            }
            Ok(found)
        };
        let layers = shadow
            .layers
            .iter()
            .map(|l| {
                Ok(LayerParams {
                    wq: find(l.wq)?,
                    bq: find(l.bq)?,
                    wk: find(l.wk)?,
                    bk: find(l.bk)?,
                    wv: find(l.wv)?,
                    bv: find(l.bv)?,
                    wo: find(l.wo)?,
                    bo: find(l.bo)?,
                    ln1_g: find(l.ln1_g)?,
                    ln1_b: find(l.ln1_b)?,
                    w1: find(l.w1)?,
                    b1: find(l.b1)?,
                    w2: find(l.w2)?,
                    b2: find(l.b2)?,
                    ln2_g: find(l.ln2_g)?,
                    ln2_b: find(l.ln2_b)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            vocab_size,
            tok_emb: find(shadow.tok_emb)?,
            pos_emb: find(shadow.pos_emb)?,
            seg_emb: find(shadow.seg_emb)?,
            emb_ln_g: find(shadow.emb_ln_g)?,
            emb_ln_b: find(shadow.emb_ln_b)?,
            layers,
        })
    }

    /// Per-token embeddings, `[batch·seq_len × d_model]`.
    pub fn encode(&self, tape: &mut Tape<'_>, batch: &PaddedBatch) -> Result<Var> {
        let cfg = &self.config;
        if batch.seq_len > cfg.max_len {
            return Err(Error::Length {
                len: batch.seq_len,
                max: cfg.max_len,
            });
        }
        if let Some(&bad) = batch.ids.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab: self.vocab_size,
            });
        }
        let ids: Vec<usize> = batch.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..batch.batch).flat_map(|_| 0..batch.seq_len).collect();
        let tok = tape.param(self.tok_emb);
        let pos = tape.param(self.pos_emb);
        let tok = tape.gather_rows(tok, &ids)?;
        let pos = tape.gather_rows(pos, &positions)?;
        let segments: Vec<usize> = batch.segments.iter().map(|&s| s as usize).collect();
        let seg = tape.param(self.seg_emb);
        let seg = tape.gather_rows(seg, &segments)?;
        let x = tape.add(tok, pos)?;
        let x = tape.add(x, seg)?;
        let (g, b) = (tape.param(self.emb_ln_g), tape.param(self.emb_ln_b));
        let x = tape.layer_norm(x, g, b, LAYER_NORM_EPS)?;
        let mut x = tape.dropout(x, cfg.dropout);
        for layer in &self.layers {
            x = self.block(tape, layer, x, batch)?;
        }
        Ok(x)
    }

    fn block(&self, tape: &mut Tape<'_>, p: &LayerParams, x: Var, batch: &PaddedBatch) -> Result<Var> {
        let cfg = &self.config;
        let q = linear(tape, x, p.wq, p.bq)?;
        let k = linear(tape, x, p.wk, p.bk)?;
        let v = linear(tape, x, p.wv, p.bv)?;
        let a = tape.attention(q, k, v, batch.batch, batch.seq_len, cfg.num_heads, &batch.mask)?;
        let a = linear(tape, a, p.wo, p.bo)?;
        let a = tape.dropout(a, cfg.dropout);
        let r = tape.add(x, a)?;
        let (g, b) = (tape.param(p.ln1_g), tape.param(p.ln1_b));
        let x = tape.layer_norm(r, g, b, LAYER_NORM_EPS)?;

        let f = linear(tape, x, p.w1, p.b1)?;
        let f = match cfg.activation {
            Activation::Gelu => tape.gelu(f),
            Activation::Relu => tape.relu(f),
        };
        let f = linear(tape, f, p.w2, p.b2)?;
        let f = tape.dropout(f, cfg.dropout);
        let r = tape.add(x, f)?;
        let (g, b) = (tape.param(p.ln2_g), tape.param(p.ln2_b));
        tape.layer_norm(r, g, b, LAYER_NORM_EPS)
    }

    /// Encodes and pools, one row per sequence.
    pub fn encode_pooled(&self, tape: &mut Tape<'_>, batch: &PaddedBatch, pooling: Pooling) -> Result<Var> {
        let h = self.encode(tape, batch)?;
        tape.pool(h, batch.seq_len, &batch.mask, pooling)
    }
}

fn reg_weight(reg: &mut ParamRegistry, init: &mut Initializer, name: String, shape: &[usize]) -> Result<ParamId> {
    reg.register(name, init.weight(shape), false)
}

/// `x·W + b`.
pub fn linear(tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (wv, bv) = (tape.param(w), tape.param(b));
    let y = tape.matmul(x, wv)?;
    tape.add_row(y, bv)
}

#[cfg(test)]
mod tests;
