//! Pair batching, AdamW, the learning-rate schedule and the training loop.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_dense, EvalReport};
use crate::models::Model;
use crate::nncore::{Gradients, ParamRegistry, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Text–topic pairs per micro-batch.
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub weight_decay: f64,
    pub learning_rate: f64,
    /// Warm-up length in optimizer steps; `None` means `warmup_fraction`
    /// of all scheduled steps.
    pub warmup_steps: Option<usize>,
    pub warmup_fraction: f64,
    pub max_epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 12,
            grad_accum_steps: 8,
            weight_decay: 0.01,
            learning_rate: 1e-3,
            warmup_steps: None,
            warmup_fraction: 0.1,
            max_epochs: 6,
            patience: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The large-model recipe: lr 1e-5 with 10,000 warm-up steps.
    pub fn reference() -> Self {
        Self {
            learning_rate: 1e-5,
            warmup_steps: Some(10_000),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return fail("batch_size and grad_accum_steps must be at least 1");
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return fail("patience and max_epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return fail("learning_rate must be positive and weight_decay non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail("warmup_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn warmup_for(&self, total_steps: usize) -> Result<usize> {
        let w = self
            .warmup_steps
            .unwrap_or_else(|| (self.warmup_fraction * total_steps as f64).round() as usize);
        if w > total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {w} exceeds the {total_steps} scheduled steps"
            )));
        }
        Ok(w)
    }
}

/// Linear warm-up to `lr_max`, then linear decay reaching zero at `total`.
/// `step` counts from 1.
pub fn learning_rate_at(step: usize, lr_max: f64, warmup: usize, total: usize) -> f64 {
    if step <= warmup && warmup > 0 {
        lr_max * step as f64 / warmup as f64
    } else if total > warmup {
        lr_max * total.saturating_sub(step) as f64 / (total - warmup) as f64
    } else {
        0.0
    }
}

/// A labeled pair: indices into a text list and a topic list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    pub text: usize,
    pub topic: usize,
    pub label: f64,
}

/// Shuffles by `(seed, epoch)` and cuts into batches; the last one may be
/// short.
pub fn make_pair_batches(pairs: &[Pair], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<Pair>>> {
    if pairs.is_empty() {
        return Err(Error::Empty("no labeled pairs to train on".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order = pairs.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[Pair]>::to_vec).collect())
}

/// AdamW with decoupled weight decay on everything but gains and biases.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamRegistry, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, p)| vec![0.0; p.tensor.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with gradient `grads[i]` for parameter `i` (missing
    /// entries count as zero).
    pub fn step(&mut self, params: &mut ParamRegistry, grads: &[Option<Vec<f64>>], lr: f64) -> Result<()> {
        for (id, name, _) in params.iter() {
            if let Some(Some(g)) = grads.get(id.index()) {
                if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numeric {
                        context: format!("gradient of {name}[{k}]"),
                        detail: format!("value {}", g[k]),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let decay = if params.get(id).is_gain_or_bias { 0.0 } else { self.weight_decay };
            let g = grads.get(i).and_then(Option::as_deref);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = params.tensor_mut(id).data_mut();
            for k in 0..w.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                w[k] -= lr * (update + decay * w[k]);
            }
        }
        Ok(())
    }
}

/// Stops after `patience` evaluations without a strict improvement.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    /// Records `metric` for `epoch`; returns `(improved, stop)`.
    pub fn update(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        let improved = self.best.is_none_or(|(_, b)| metric > b);
        if improved {
            self.best = Some((epoch, metric));
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    #[serde(rename = "val_micro_mAP")]
    pub val_micro_map: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub best_epoch: usize,
    pub best_val_micro_map: f64,
    pub stopped_early: bool,
    pub optimizer_steps: usize,
}

pub fn write_log_csv<W: Write>(log: &[LogRow], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    for row in log {
        csv.serialize(row)?;
    }
    csv.flush()?;
    Ok(())
}

/// Rendered topic strings of a dataset, in topic order.
pub fn rendered_topics(model: &Model, dataset: &Dataset) -> Vec<String> {
    dataset
        .topics
        .iter()
        .map(|t| model.render_topic(&t.name, &t.description))
        .collect()
}

/// All labeled pairs of the given texts, indexed into `dataset.texts` and
/// `dataset.topics`.
pub fn labeled_pairs(dataset: &Dataset, text_ids: &[String]) -> Vec<Pair> {
    let text_index: HashMap<&str, usize> = dataset
        .texts
        .iter()
        .enumerate()
        .map(|(i, t)| (t.text_id.as_str(), i))
        .collect();
    let topic_index: HashMap<&str, usize> = dataset
        .topics
        .iter()
        .enumerate()
        .map(|(j, t)| (t.topic_id.as_str(), j))
        .collect();
    let wanted: std::collections::HashSet<&str> = text_ids.iter().map(String::as_str).collect();
    dataset
        .labels
        .iter()
        .filter(|(x, t, _)| wanted.contains(x) && topic_index.contains_key(t))
        .map(|(x, t, l)| Pair {
            text: text_index[x],
            topic: topic_index[t],
            label: if l { 1.0 } else { 0.0 },
        })
        .collect()
}

/// Scores the given texts against every topic of `dataset` and evaluates
/// against its labels.
pub fn evaluate(model: &Model, dataset: &Dataset, text_ids: &[String], beta: f64) -> Result<EvalReport> {
    let (scores, labels) = score_labeled(model, dataset, text_ids)?;
    aggregate_dense(&scores, &labels, &dataset.topic_ids(), beta)
}

/// Dense scores and labels for `text_ids` × all topics. Bi-encoders score
/// the full matrix (`N + T` encodes); the cross-encoder scores only labeled
/// pairs and leaves 0 elsewhere.
pub fn score_labeled(
    model: &Model,
    dataset: &Dataset,
    text_ids: &[String],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Option<bool>>>)> {
    let topics = rendered_topics(model, dataset);
    let topic_ids = dataset.topic_ids();
    let by_id: HashMap<&str, &str> = dataset
        .texts
        .iter()
        .map(|t| (t.text_id.as_str(), t.text.as_str()))
        .collect();
    let texts: Vec<&str> = text_ids
        .iter()
        .map(|x| by_id.get(x.as_str()).copied().ok_or_else(|| Error::Config(format!("unknown text {x}"))))
        .collect::<Result<_>>()?;
    let labels = dataset.labels.dense(text_ids, &topic_ids);
    let scores = if model.config().is_bi_encoder() {
        let topic_refs: Vec<&str> = topics.iter().map(String::as_str).collect();
        model.score_matrix(&texts, &topic_refs)?
    } else {
        let mut pos = Vec::new();
        let (mut px, mut pt) = (Vec::new(), Vec::new());
        for (i, row) in labels.iter().enumerate() {
            for (j, l) in row.iter().enumerate() {
                if l.is_some() {
                    pos.push((i, j));
                    px.push(texts[i]);
                    pt.push(topics[j].as_str());
                }
            }
        }
        let flat = model.score_pairs(&px, &pt)?;
        let mut m = vec![vec![0.0; topic_ids.len()]; texts.len()];
        for ((i, j), s) in pos.into_iter().zip(flat) {
            m[i][j] = s;
        }
        m
    };
    Ok((scores, labels))
}

/// Gradient of the mean loss over `pairs`, plus that loss.
pub fn pair_gradients(
    model: &Model,
    params: &ParamRegistry,
    texts: &[&str],
    topics: &[&str],
    pairs: &[Pair],
    dropout_seed: Option<u64>,
) -> Result<(Gradients, f64)> {
    let mut tape = match dropout_seed {
        Some(s) => Tape::with_dropout(params, s),
        None => Tape::new(params),
    };
    let xs: Vec<&str> = pairs.iter().map(|p| texts[p.text]).collect();
    let ts: Vec<&str> = pairs.iter().map(|p| topics[p.topic]).collect();
    let labels: Vec<f64> = pairs.iter().map(|p| p.label).collect();
    let out = model.forward_pairs(&mut tape, &xs, &ts)?;
    let loss = model.loss(&mut tape, out, &labels)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric {
            context: "training loss".into(),
            detail: format!("value {value}"),
        });
    }
    Ok((tape.backward(loss)?, value))
}

/// Averages micro-batch gradients weighted by micro-batch size, so an
/// accumulated step equals one step over the concatenated pairs.
pub fn accumulate_step(
    model: &Model,
    texts: &[&str],
    topics: &[&str],
    micro_batches: &[Vec<Pair>],
    dropout_seed: Option<u64>,
) -> Result<(Vec<Option<Vec<f64>>>, f64)> {
    let params = model.params();
    let total: usize = micro_batches.iter().map(Vec::len).sum();
    let mut acc: Vec<Option<Vec<f64>>> = vec![None; params.len()];
    let mut loss_sum = 0.0;
    for (k, mb) in micro_batches.iter().enumerate() {
        let seed = dropout_seed.map(|s| s.wrapping_add(k as u64));
        let (grads, loss) = pair_gradients(model, params, texts, topics, mb, seed)?;
        let w = mb.len() as f64 / total as f64;
        loss_sum += loss * mb.len() as f64;
        for (id, g) in grads.iter() {
            let slot = acc[id.index()].get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in slot.iter_mut().zip(g) {
                *a += w * b;
            }
        }
    }
    Ok((acc, loss_sum / total as f64))
}

/// Trains `model` on the labeled pairs of `train_ids`, evaluating micro AP
/// on `val_ids` after every epoch. The model ends up holding the weights of
/// the best evaluation. `observer` sees every micro-batch before use.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    train_ids: &[String],
    val_ids: &[String],
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&[Pair]),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val_ids.is_empty() {
        return Err(Error::Precondition("validation split is empty".into()));
    }
    let pairs = labeled_pairs(dataset, train_ids);
    if pairs.is_empty() {
        return Err(Error::Empty("no labeled training pairs".into()));
    }
    let topic_strings = rendered_topics(model, dataset);
    let topics: Vec<&str> = topic_strings.iter().map(String::as_str).collect();
    let texts: Vec<&str> = dataset.texts.iter().map(|t| t.text.as_str()).collect();

    let batches_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let steps_per_epoch = batches_per_epoch.div_ceil(cfg.grad_accum_steps);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let warmup = cfg.warmup_for(total_steps)?;
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params().clone();
    let mut log = Vec::new();
    let mut step = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let batches = make_pair_batches(&pairs, cfg.batch_size, cfg.seed, epoch)?;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        let mut lr = 0.0;
        for group in batches.chunks(cfg.grad_accum_steps) {
            for mb in group {
                observer(mb);
            }
            step += 1;
            let seed = cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add((step as u64) << 16);
            let (grads, loss) = accumulate_step(model, &texts, &topics, group, Some(seed))?;
            let n: usize = group.iter().map(Vec::len).sum();
            loss_sum += loss * n as f64;
            seen += n;
            lr = learning_rate_at(step, cfg.learning_rate, warmup, total_steps);
            opt.step(model.params_mut(), &grads, lr)?;
        }
        let val = evaluate(model, dataset, val_ids, 1.0)?.micro_ap;
        let train_loss = loss_sum / seen as f64;
        log::info!("epoch {epoch}: train_loss {train_loss:.5} val_micro_mAP {val:.5}");
        log.push(LogRow {
            epoch,
            step,
            train_loss,
            val_micro_map: val,
            lr,
        });
        let (improved, stop) = stopper.update(epoch, val);
        if improved {
            best_params = model.params().clone();
        }
        if stop {
            stopped_early = epoch + 1 < cfg.max_epochs;
            break;
        }
    }
    *model.params_mut() = best_params;
    let (best_epoch, best_val) = stopper.best().expect("at least one evaluation");
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_micro_map: best_val,
        stopped_early,
        optimizer_steps: step,
    })
}

#[cfg(test)]
mod tests;
