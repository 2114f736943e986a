//! Cross-encoder and bi-encoder scoring architectures.

mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use indexmap::IndexSet;
use sha2::{Digest, Sha256};

pub use config::{Architecture, CombinationMode, ModelConfig, TopicRendering, MODEL_NAMES};
use crate::encoder::{linear, tokenize, tokenize_pair, EncoderParams, PaddedBatch, Pooling, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::nncore::{read_params, sigmoid, write_params, CheckpointHeader, Initializer, ParamId, ParamRegistry, Tape, Tensor, Var};

/// Sequences per forward pass when scoring outside of training.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug)]
enum Head {
    None,
    Linear { w: ParamId, b: ParamId },
    Ffn { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

/// A trainable text–topic scorer: shared encoder, head and vocabulary.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    vocab: Vocabulary,
    params: ParamRegistry,
    encoder: EncoderParams,
    head: Head,
    seed: u64,
    encode_calls: AtomicUsize,
    head_evals: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.clone(),
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            seed: self.seed,
            encode_calls: AtomicUsize::new(self.encode_calls()),
            head_evals: AtomicUsize::new(self.head_evals()),
        }
    }
}

/// `[U; V]`, `[U; V; U−V]` or `[U; V; U−V; U⊙V]`, row by row.
pub fn combine(tape: &mut Tape<'_>, u: Var, v: Var, mode: CombinationMode) -> Result<Var> {
    if tape.value(u).shape() != tape.value(v).shape() {
        return Err(Error::dim("combine", "topic and text embeddings differ in shape"));
    }
    let parts = match mode {
        CombinationMode::Cosine => {
            return Err(Error::Config("cosine mode has no combined representation".into()))
        }
        CombinationMode::Concat => vec![u, v],
        CombinationMode::ConcatSub => vec![u, v, tape.sub(u, v)?],
        CombinationMode::ConcatSubMult => vec![u, v, tape.sub(u, v)?, tape.mul(u, v)?],
    };
    tape.concat_cols(&parts)
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamRegistry::new();
        let mut init = Initializer::with_std(seed, config.init_std);
        let encoder = EncoderParams::register(&mut params, &mut init, "encoder", &config.encoder, vocab.len())?;
        let d = config.encoder.d_model;
        let head = match (config.architecture, config.combination_mode()) {
            (Architecture::BiCosine, _) => Head::None,
            (Architecture::Cross, _) => Head::Linear {
                w: params.register("head.weight", init.weight(&[d, 1]), false)?,
                b: params.register("head.bias", init.bias(1), true)?,
            },
            (Architecture::BiConcat, mode) => {
                let d_e = mode.and_then(|m| m.width(d)).expect("validated");
                Head::Ffn {
                    w1: params.register("head.ffn1.weight", init.weight(&[d_e, d]), false)?,
                    b1: params.register("head.ffn1.bias", init.bias(d), true)?,
                    w2: params.register("head.ffn2.weight", init.weight(&[d, 1]), false)?,
                    b2: params.register("head.ffn2.bias", init.bias(1), true)?,
                }
            }
        };
        Ok(Self {
            config,
            vocab,
            params,
            encoder,
            head,
            seed,
            encode_calls: AtomicUsize::new(0),
            head_evals: AtomicUsize::new(0),
        })
    }

    fn from_parts(config: ModelConfig, vocab: Vocabulary, params: ParamRegistry, seed: u64) -> Result<Self> {
        let shell = Self::new(config.clone(), vocab.clone(), seed)?;
        if shell.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                shell.params.len(),
                params.len()
            )));
        }
        for (_, name, p) in shell.params.iter() {
            let found = params
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if found.tensor.shape() != p.tensor.shape() || found.is_gain_or_bias != p.is_gain_or_bias {
                return Err(Error::Checkpoint(format!("parameter {name} does not match the config")));
            }
        }
        let encoder = EncoderParams::attach(&params, "encoder", &config.encoder, vocab.len())?;
        let relink = |id: ParamId| params.id(shell.params.name(id)).expect("checked above");
        let head = match shell.head {
            Head::None => Head::None,
            Head::Linear { w, b } => Head::Linear {
                w: relink(w),
                b: relink(b),
            },
            Head::Ffn { w1, b1, w2, b2 } => Head::Ffn {
                w1: relink(w1),
                b1: relink(b1),
                w2: relink(w2),
                b2: relink(b2),
            },
        };
        Ok(Self {
            config,
            vocab,
            params,
            encoder,
            head,
            seed,
            encode_calls: AtomicUsize::new(0),
            head_evals: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamRegistry {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamRegistry {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn d_model(&self) -> usize {
        self.config.encoder.d_model
    }

    /// Sequences passed through the encoder since the last reset.
    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    /// Text–topic pairs scored by a head since the last reset.
    pub fn head_evals(&self) -> usize {
        self.head_evals.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.encode_calls.store(0, Ordering::Relaxed);
        self.head_evals.store(0, Ordering::Relaxed);
    }

    pub fn render_topic(&self, name: &str, description: &str) -> String {
        self.config.topic_rendering.render(name, description)
    }

    fn max_len(&self) -> usize {
        self.config.encoder.max_len
    }

    /// Pooled embeddings of `texts`, one row each.
    pub fn pooled(&self, tape: &mut Tape<'_>, texts: &[&str]) -> Result<Var> {
        let seqs: Vec<_> = texts
            .iter()
            .map(|t| tokenize(t, &self.vocab, true, self.max_len()))
            .collect();
        let refs: Vec<_> = seqs.iter().collect();
        let batch = PaddedBatch::dynamic(&refs)?;
        self.encode_calls.fetch_add(texts.len(), Ordering::Relaxed);
        self.encoder.encode_pooled(tape, &batch, self.config.encoder.pooling)
    }

    /// Raw model output per pair, `P × 1`: a logit, or a cosine for
    /// `bi_cosine`. Texts and topics repeated across pairs are encoded once.
    pub fn forward_pairs(&self, tape: &mut Tape<'_>, texts: &[&str], topics: &[&str]) -> Result<Var> {
        if texts.len() != topics.len() {
            return Err(Error::dim("forward_pairs", "texts and topics differ in length"));
        }
        if texts.is_empty() {
            return Err(Error::Empty("no pairs to score".into()));
        }
        match self.config.architecture {
            Architecture::Cross => self.cross_forward(tape, texts, topics),
            _ => {
                let unique_texts: IndexSet<&str> = texts.iter().copied().collect();
                let unique_topics: IndexSet<&str> = topics.iter().copied().collect();
                let text_rows: Vec<usize> = texts.iter().map(|t| unique_texts.get_index_of(t).unwrap()).collect();
                let topic_rows: Vec<usize> = topics.iter().map(|t| unique_topics.get_index_of(t).unwrap()).collect();
                let tv: Vec<&str> = unique_texts.into_iter().collect();
                let uv: Vec<&str> = unique_topics.into_iter().collect();
                let v_all = self.pooled(tape, &tv)?;
                let u_all = self.pooled(tape, &uv)?;
                let v = tape.gather_rows(v_all, &text_rows)?;
                let u = tape.gather_rows(u_all, &topic_rows)?;
                self.bi_head(tape, u, v)
            }
        }
    }

    /// Head over already-pooled topic rows `u` and text rows `v`.
    pub fn bi_head(&self, tape: &mut Tape<'_>, u: Var, v: Var) -> Result<Var> {
        let pairs = tape.value(u).rows();
        self.head_evals.fetch_add(pairs, Ordering::Relaxed);
        match (&self.head, self.config.combination_mode()) {
            (Head::None, _) => tape.cosine_rows(u, v),
            (&Head::Ffn { w1, b1, w2, b2 }, Some(mode)) => {
                let e = combine(tape, u, v, mode)?;
                let h = linear(tape, e, w1, b1)?;
                let h = tape.relu(h);
                let h = tape.dropout(h, self.config.head_dropout);
                linear(tape, h, w2, b2)
            }
            _ => Err(Error::UnsupportedArchitecture(
                "cross-encoder has no bi-encoder head".into(),
            )),
        }
    }

    fn cross_forward(&self, tape: &mut Tape<'_>, texts: &[&str], topics: &[&str]) -> Result<Var> {
        let Head::Linear { w, b } = self.head else {
            unreachable!("cross architecture always has a linear head")
        };
        let seqs: Vec<_> = texts
            .iter()
            .zip(topics)
            .map(|(x, t)| tokenize_pair(x, t, &self.vocab, self.max_len()))
            .collect();
        let refs: Vec<_> = seqs.iter().collect();
        let batch = PaddedBatch::dynamic(&refs)?;
        self.encode_calls.fetch_add(texts.len(), Ordering::Relaxed);
        self.head_evals.fetch_add(texts.len(), Ordering::Relaxed);
        let pooled = self.encoder.encode_pooled(tape, &batch, Pooling::Cls)?;
        let pooled = tape.dropout(pooled, self.config.head_dropout);
        linear(tape, pooled, w, b)
    }

    /// BCE for logit outputs, MSE for cosine outputs.
    pub fn loss(&self, tape: &mut Tape<'_>, outputs: Var, labels: &[f64]) -> Result<Var> {
        match self.config.architecture {
            Architecture::BiCosine => tape.mse(outputs, labels),
            _ => tape.bce_with_logits(outputs, labels),
        }
    }

    /// Maps a raw output to a score in `[0, 1]`.
    pub fn output_to_score(&self, raw: f64) -> f64 {
        match self.config.architecture {
            Architecture::BiCosine => ((1.0 + raw) / 2.0).clamp(0.0, 1.0),
            _ => sigmoid(raw),
        }
    }

    /// Scores for explicit pairs in eval mode.
    pub fn score_pairs(&self, texts: &[&str], topics: &[&str]) -> Result<Vec<f64>> {
        if texts.len() != topics.len() {
            return Err(Error::dim("score_pairs", "texts and topics differ in length"));
        }
        let mut out = Vec::with_capacity(texts.len());
        for (xs, ts) in texts.chunks(EVAL_CHUNK).zip(topics.chunks(EVAL_CHUNK)) {
            let mut tape = Tape::new(&self.params);
            let raw = self.forward_pairs(&mut tape, xs, ts)?;
            out.extend(tape.value(raw).data().iter().map(|&r| self.output_to_score(r)));
        }
        Ok(out)
    }

    /// Pooled embeddings in eval mode (bi-encoders only).
    pub fn embed(&self, texts: &[&str]) -> Result<Tensor> {
        if !self.config.is_bi_encoder() {
            return Err(Error::UnsupportedArchitecture(
                "cross-encoder has no standalone embeddings".into(),
            ));
        }
        let d = self.d_model();
        let mut data = Vec::with_capacity(texts.len() * d);
        for chunk in texts.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new(&self.params);
            let p = self.pooled(&mut tape, chunk)?;
            data.extend_from_slice(tape.value(p).data());
        }
        Tensor::new(vec![texts.len(), d], data)
    }

    /// Token sequence used for a single text (CLS prepended).
    pub fn tokenize_text(&self, text: &str) -> TokenSequence {
        tokenize(text, &self.vocab, true, self.max_len())
    }

    /// Pooled embeddings of pre-tokenized sequences encoded as one batch,
    /// padded to `seq_len` or, when `None`, to the longest sequence.
    pub fn embed_batch(&self, seqs: &[&TokenSequence], seq_len: Option<usize>) -> Result<Tensor> {
        if !self.config.is_bi_encoder() {
            return Err(Error::UnsupportedArchitecture(
                "cross-encoder has no standalone embeddings".into(),
            ));
        }
        let batch = match seq_len {
            Some(l) => PaddedBatch::to_length(seqs, l)?,
            None => PaddedBatch::dynamic(seqs)?,
        };
        let mut tape = Tape::new(&self.params);
        self.encode_calls.fetch_add(seqs.len(), Ordering::Relaxed);
        let p = self.encoder.encode_pooled(&mut tape, &batch, self.config.encoder.pooling)?;
        Ok(tape.value(p).clone())
    }

    /// Scores every text row against every topic row, `N × T`.
    pub fn head_scores(&self, text_emb: &Tensor, topic_emb: &Tensor) -> Result<Vec<Vec<f64>>> {
        let (n, t) = (text_emb.rows(), topic_emb.rows());
        if n == 0 || t == 0 {
            return Ok(vec![Vec::new(); n]);
        }
        let per_chunk = (EVAL_CHUNK * 16 / t).max(1);
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(per_chunk) {
            let end = (start + per_chunk).min(n);
            let mut tape = Tape::new(&self.params);
            let texts = tape.constant(slice_rows(text_emb, start, end));
            let topics = tape.constant(topic_emb.clone());
            let text_rows: Vec<usize> = (0..end - start).flat_map(|i| std::iter::repeat_n(i, t)).collect();
            let topic_rows: Vec<usize> = (0..end - start).flat_map(|_| 0..t).collect();
            let v = tape.gather_rows(texts, &text_rows)?;
            let u = tape.gather_rows(topics, &topic_rows)?;
            let raw = self.bi_head(&mut tape, u, v)?;
            for row in tape.value(raw).data().chunks(t) {
                out.push(row.iter().map(|&r| self.output_to_score(r)).collect());
            }
        }
        Ok(out)
    }

    /// Full `N × T` score matrix: `N + T` encodes for bi-encoders, `N·T`
    /// for the cross-encoder.
    pub fn score_matrix(&self, texts: &[&str], topics: &[&str]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        if self.config.is_bi_encoder() {
            let v = self.embed(texts)?;
            let u = self.embed(topics)?;
            return self.head_scores(&v, &u);
        }
        let mut pair_texts = Vec::with_capacity(texts.len() * topics.len());
        let mut pair_topics = Vec::with_capacity(texts.len() * topics.len());
        for x in texts {
            for t in topics {
                pair_texts.push(*x);
                pair_topics.push(*t);
            }
        }
        let flat = self.score_pairs(&pair_texts, &pair_topics)?;
        Ok(flat.chunks(topics.len().max(1)).map(<[f64]>::to_vec).collect())
    }

    fn config_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.config)?)
    }

    /// SHA-256 over config, vocabulary and parameter bits.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.config_json()?.as_bytes());
        let mut buf = Vec::new();
        self.vocab.write_tsv(&mut buf)?;
        let header = CheckpointHeader {
            config_hash: String::new(),
            seed: self.seed,
        };
        write_params(&mut buf, &header, &self.params)?;
        h.update(&buf);
        Ok(hex::encode(h.finalize()))
    }

    /// Writes `config.json`, `params.bin` and `vocab.tsv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let json = self.config_json()?;
        fs::write(dir.join("config.json"), &json)?;
        let header = CheckpointHeader {
            config_hash: hex::encode(Sha256::digest(json.as_bytes())),
            seed: self.seed,
        };
        let mut w = BufWriter::new(File::create(dir.join("params.bin"))?);
        write_params(&mut w, &header, &self.params)?;
        w.flush()?;
        let mut v = BufWriter::new(File::create(dir.join("vocab.tsv"))?);
        self.vocab.write_tsv(&mut v)?;
        v.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let json = fs::read_to_string(dir.join("config.json"))?;
        let config: ModelConfig = serde_json::from_str(&json)?;
        config.validate()?;
        let mut r = BufReader::new(File::open(dir.join("params.bin"))?);
        let (header, params) = read_params(&mut r)?;
        let expected = hex::encode(Sha256::digest(json.as_bytes()));
        if header.config_hash != expected {
            return Err(Error::Checkpoint("params.bin was written for a different config".into()));
        }
        let vocab = Vocabulary::read_tsv(BufReader::new(File::open(dir.join("vocab.tsv"))?))?;
        Self::from_parts(config, vocab, params, header.seed)
    }
}

fn slice_rows(t: &Tensor, start: usize, end: usize) -> Tensor {
    let c = t.cols();
    Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec()).expect("row slice")
}

#[cfg(test)]
mod tests;
