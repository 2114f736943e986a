//! Inference layer: cached topic embeddings, batched scoring, window
//! batching, a line-delimited JSON server, backfill and benchmarking.

mod backfill;
mod bench;
mod server;
mod window;

use serde::{Deserialize, Serialize};

use crate::data::Topic;
use crate::encoder::{PaddedBatch, TokenSequence};
use crate::error::{Error, Result};
use crate::metrics::ScoreMatrix;
use crate::models::Model;
use crate::nncore::Tensor;

pub use backfill::{backfill, BackfillConfig, BackfillSummary, Progress};
pub use bench::{benchmark, cost_per_million, write_benchmark_csv, BenchConfig, BenchRow, DEFAULT_PRICE_PER_MIN};
pub use server::{serve_lines, serve_stdio, serve_tcp, Request, Response, ServeStats, ServerConfig};
pub use window::{
    simulate, Batch, BatchRecord, SimConfig, SimEvent, SimOutcome, SimReport, SimResponse, Trigger, WindowBatcher,
    WindowConfig,
};

/// Pooled topic embeddings, computed once per checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TopicEmbeddingCache {
    pub topic_ids: Vec<String>,
    /// `T × d_model`, rows in `topic_ids` order.
    pub embeddings: Tensor,
    /// Fingerprint of the model that produced the embeddings.
    pub model_hash: String,
}

impl TopicEmbeddingCache {
    pub fn len(&self) -> usize {
        self.topic_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topic_ids.is_empty()
    }
}

/// Encodes every topic once (`T` encode calls).
pub fn build_topic_cache(model: &Model, topics: &[Topic]) -> Result<TopicEmbeddingCache> {
    if topics.is_empty() {
        return Err(Error::Empty("no topics to cache".into()));
    }
    if !model.config().is_bi_encoder() {
        return Err(Error::UnsupportedArchitecture(
            "topic caching needs a bi-encoder checkpoint".into(),
        ));
    }
    let rendered: Vec<String> = topics.iter().map(|t| model.render_topic(&t.name, &t.description)).collect();
    let refs: Vec<&str> = rendered.iter().map(String::as_str).collect();
    Ok(TopicEmbeddingCache {
        topic_ids: topics.iter().map(|t| t.topic_id.clone()).collect(),
        embeddings: model.embed(&refs)?,
        model_hash: model.fingerprint()?,
    })
}

/// How a scoring call pads and groups its texts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchOptions {
    /// Texts per encoder pass.
    pub max_batch: usize,
    /// Pad to the longest sequence of each pass instead of `max_len`.
    pub dynamic_padding: bool,
    /// Sort by token length before forming passes.
    pub bucket_by_length: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            max_batch: 64,
            dynamic_padding: true,
            bucket_by_length: true,
        }
    }
}

/// Pads a batch to its own longest sequence.
pub fn dynamic_pad(seqs: &[&TokenSequence]) -> Result<PaddedBatch> {
    PaddedBatch::dynamic(seqs)
}

/// Groups indices into passes of at most `max_batch`, shortest first when
/// bucketing. Ties keep input order.
pub fn length_buckets(lengths: &[usize], max_batch: usize, bucket: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    if bucket {
        order.sort_by_key(|&i| lengths[i]);
    }
    order.chunks(max_batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// A bi-encoder checkpoint paired with a topic cache built from it.
pub struct Predictor {
    model: Model,
    cache: TopicEmbeddingCache,
}

impl Predictor {
    /// Fails with a stale-cache error unless `cache` came from `model`.
    pub fn new(model: Model, cache: TopicEmbeddingCache) -> Result<Self> {
        let hash = model.fingerprint()?;
        if hash != cache.model_hash {
            return Err(Error::StaleCache {
                cache: cache.model_hash.clone(),
                model: hash,
            });
        }
        if cache.embeddings.rows() != cache.topic_ids.len() || cache.embeddings.cols() != model.d_model() {
            return Err(Error::dim("topic cache", "embedding table does not match the model"));
        }
        Ok(Self { model, cache })
    }

    /// Builds the cache from `topics` and wraps both.
    pub fn warm(model: Model, topics: &[Topic]) -> Result<Self> {
        let cache = build_topic_cache(&model, topics)?;
        Self::new(model, cache)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn cache(&self) -> &TopicEmbeddingCache {
        &self.cache
    }

    pub fn model_hash(&self) -> &str {
        &self.cache.model_hash
    }

    /// Scores `texts` against every cached topic: `N` encode calls and
    /// `N·T` head evaluations.
    pub fn predict(&self, text_ids: &[String], texts: &[&str], opts: &BatchOptions) -> Result<ScoreMatrix> {
        if text_ids.len() != texts.len() {
            return Err(Error::dim("predict", "ids and texts differ in length"));
        }
        let scores = self.score(texts, opts)?;
        Ok(ScoreMatrix {
            text_ids: text_ids.to_vec(),
            topic_ids: self.cache.topic_ids.clone(),
            scores,
        })
    }

    pub fn score(&self, texts: &[&str], opts: &BatchOptions) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let seqs: Vec<TokenSequence> = texts.iter().map(|t| self.model.tokenize_text(t)).collect();
        let lengths: Vec<usize> = seqs.iter().map(TokenSequence::len).collect();
        let d = self.model.d_model();
        let mut emb = vec![0.0; texts.len() * d];
        let fixed = (!opts.dynamic_padding).then_some(self.model.config().encoder.max_len);
        for pass in length_buckets(&lengths, opts.max_batch, opts.bucket_by_length) {
            let refs: Vec<&TokenSequence> = pass.iter().map(|&i| &seqs[i]).collect();
            let out = self.model.embed_batch(&refs, fixed)?;
            for (r, &i) in pass.iter().enumerate() {
                emb[i * d..(i + 1) * d].copy_from_slice(out.row_slice(r));
            }
        }
        let emb = Tensor::new(vec![texts.len(), d], emb)?;
        self.model.head_scores(&emb, &self.cache.embeddings)
    }
}

/// One-shot batched prediction against a cache; checks the cache hash
/// against the model first.
pub fn predict_batch(
    text_ids: &[String],
    texts: &[&str],
    cache: &TopicEmbeddingCache,
    model: &Model,
) -> Result<ScoreMatrix> {
    let hash = model.fingerprint()?;
    if hash != cache.model_hash {
        return Err(Error::StaleCache {
            cache: cache.model_hash.clone(),
            model: hash,
        });
    }
    if text_ids.len() != texts.len() {
        return Err(Error::dim("predict", "ids and texts differ in length"));
    }
    let scores = if texts.is_empty() {
        Vec::new()
    } else {
        model.head_scores(&model.embed(texts)?, &cache.embeddings)?
    };
    Ok(ScoreMatrix {
        text_ids: text_ids.to_vec(),
        topic_ids: cache.topic_ids.clone(),
        scores,
    })
}

#[cfg(test)]
mod tests;
