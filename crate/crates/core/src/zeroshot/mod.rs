//! Topic-held-out evaluation: topics are split into folds, a fresh model is
//! trained on all but one fold and scored on the unseen topics.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::metrics::{aggregate_dense, EvalReport};
use crate::models::{Model, ModelConfig};
use crate::training::{score_labeled, train, TrainConfig, TrainOutcome};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicFold {
    pub fold: usize,
    pub train_topics: Vec<String>,
    pub held_out: Vec<String>,
}

/// Shuffles the topics with `seed` and deals them into `k` held-out sets
/// whose sizes differ by at most one.
pub fn make_topic_folds(topic_ids: &[String], k: usize, seed: u64) -> Result<Vec<TopicFold>> {
    if k == 0 {
        return Err(Error::Config("fold count must be positive".into()));
    }
    if k > topic_ids.len() {
        return Err(Error::Config(format!(
            "cannot make {k} folds from {} topics",
            topic_ids.len()
        )));
    }
    let unique: HashSet<&String> = topic_ids.iter().collect();
    if unique.len() != topic_ids.len() {
        return Err(Error::Config("duplicate topic ids".into()));
    }
    let mut order = topic_ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = order.len() / k;
    let extra = order.len() % k;
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        let mut held_out = order[start..start + size].to_vec();
        held_out.sort();
        start += size;
        let held: HashSet<&String> = held_out.iter().collect();
        let train_topics = topic_ids.iter().filter(|t| !held.contains(t)).cloned().collect();
        folds.push(TopicFold {
            fold,
            train_topics,
            held_out,
        });
    }
    Ok(folds)
}

pub fn write_folds(folds: &[TopicFold], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(folds)? + "\n")?;
    Ok(())
}

pub fn read_folds(path: &Path) -> Result<Vec<TopicFold>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub held_out: Vec<String>,
    pub best_epoch: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub folds: Vec<FoldResult>,
    /// All held-out topics scored by their own fold's model.
    pub pooled: EvalReport,
}

/// Trains one model per fold on train-topic annotations of `split.train`
/// (early stopping on `split.val`, also restricted to train topics) and
/// evaluates it on the held-out topics over `split.test`.
///
/// Every training micro-batch is audited; a held-out topic reaching a batch
/// aborts the run.
pub fn zero_shot_eval(
    model_config: &ModelConfig,
    vocab: &Vocabulary,
    train_config: &TrainConfig,
    dataset: &Dataset,
    split: &Split,
    folds: &[TopicFold],
    beta: f64,
) -> Result<ZeroShotReport> {
    check_partition(folds, &dataset.topic_ids())?;
    let mut results = Vec::with_capacity(folds.len());
    let mut columns: BTreeMap<String, (Vec<f64>, Vec<Option<bool>>)> = BTreeMap::new();
    for fold in folds {
        let (outcome, model) = train_fold(model_config, vocab, train_config, dataset, split, fold)?;
        let held = dataset.with_topics(&fold.held_out);
        let (scores, labels) = score_labeled(&model, &held, &split.test)?;
        let report = aggregate_dense(&scores, &labels, &held.topic_ids(), beta)?;
        log::info!(
            "fold {}: held-out macro mAP {:.4}, macro best F1 {:.4}",
            fold.fold,
            report.macro_map,
            report.macro_best_f1
        );
        for (j, topic) in held.topic_ids().into_iter().enumerate() {
            let s = scores.iter().map(|r| r[j]).collect();
            let l = labels.iter().map(|r| r[j]).collect();
            columns.insert(topic, (s, l));
        }
        results.push(FoldResult {
            fold: fold.fold,
            held_out: fold.held_out.clone(),
            best_epoch: outcome.best_epoch,
            report,
        });
    }
    let topic_ids: Vec<String> = dataset.topic_ids();
    let n = split.test.len();
    let mut scores = vec![Vec::with_capacity(topic_ids.len()); n];
    let mut labels = vec![Vec::with_capacity(topic_ids.len()); n];
    for t in &topic_ids {
        let (s, l) = &columns[t];
        for i in 0..n {
            scores[i].push(s[i]);
            labels[i].push(l[i]);
        }
    }
    let pooled = aggregate_dense(&scores, &labels, &topic_ids, beta)?;
    Ok(ZeroShotReport {
        folds: results,
        pooled,
    })
}

fn check_partition(folds: &[TopicFold], topic_ids: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for f in folds {
        for t in &f.held_out {
            if !seen.insert(t.as_str()) {
                return Err(Error::Config(format!("topic {t} is held out by more than one fold")));
            }
        }
        if f.train_topics.iter().any(|t| f.held_out.contains(t)) {
            return Err(Error::Config(format!("fold {} trains on a held-out topic", f.fold)));
        }
    }
    if let Some(missing) = topic_ids.iter().find(|t| !seen.contains(t.as_str())) {
        return Err(Error::Config(format!("topic {missing} is not held out by any fold")));
    }
    if seen.len() != topic_ids.len() {
        return Err(Error::Config("folds name topics absent from the dataset".into()));
    }
    Ok(())
}

/// Fresh model trained on one fold's train topics.
pub fn train_fold(
    model_config: &ModelConfig,
    vocab: &Vocabulary,
    train_config: &TrainConfig,
    dataset: &Dataset,
    split: &Split,
    fold: &TopicFold,
) -> Result<(TrainOutcome, Model)> {
    let train_ds = dataset.with_topics(&fold.train_topics);
    let held: HashSet<&str> = fold.held_out.iter().map(String::as_str).collect();
    let seed = train_config.seed.wrapping_add(fold.fold as u64);
    let mut model = Model::new(model_config.clone(), vocab.clone(), seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_config.clone()
    };
    let mut leaked = 0usize;
    let outcome = train(&mut model, &train_ds, &split.train, &split.val, &cfg, &mut |batch| {
        leaked += batch
            .iter()
            .filter(|p| held.contains(train_ds.topics[p.topic].topic_id.as_str()))
            .count();
    })?;
    if leaked > 0 {
        return Err(Error::Task(format!(
            "{leaked} held-out pair(s) reached training in fold {}",
            fold.fold
        )));
    }
    Ok((outcome, model))
}
