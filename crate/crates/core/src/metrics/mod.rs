//! Partial-label average precision, its macro/weighted/micro aggregates and
//! F-beta threshold selection.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PartialLabelMatrix;
use crate::error::{Error, Result};

/// Seed of the shuffle that breaks score ties before ranking.
pub const TIE_SEED: u64 = 0x7A1E_5EED;

/// Scores for `text_ids × topic_ids`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub text_ids: Vec<String>,
    pub topic_ids: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.scores.len() != self.text_ids.len() || self.scores.iter().any(|r| r.len() != self.topic_ids.len()) {
            return Err(Error::dim("score matrix", "rows or columns do not match the id axes"));
        }
        if self.scores.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::Numeric {
                context: "score matrix".into(),
                detail: "non-finite score".into(),
            });
        }
        Ok(())
    }
}

/// Indices ordered by descending score; ties keep the order of a fixed
/// seeded shuffle.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(TIE_SEED));
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Non-interpolated AP: mean precision at the rank of each positive.
/// `None` when there is no positive.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

/// `(1+β²)·TP / ((1+β²)·TP + β²·FN + FP)`, zero when nothing is both
/// predicted and positive.
pub fn fbeta(tp: usize, fp: usize, fn_: usize, beta: f64) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let b2 = beta * beta;
    let num = (1.0 + b2) * tp as f64;
    num / (num + b2 * fn_ as f64 + fp as f64)
}

/// Relative slack under which two F-beta values count as tied.
const FBETA_TIE: f64 = 1e-12;

/// Sweeps thresholds (predict positive iff `score ≥ threshold`) over the
/// lowest score, midpoints between consecutive distinct scores and a point
/// above the highest score. Returns the lowest threshold with maximal
/// F-beta.
pub fn select_threshold(scores: &[f64], labels: &[bool], beta: f64) -> Result<(f64, f64)> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    if scores.len() != labels.len() {
        return Err(Error::dim("select_threshold", "scores and labels differ in length"));
    }
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Err(Error::Precondition("threshold selection needs a positive".into()));
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Walk thresholds upward; at each distinct score value everything at or
    // above it is predicted positive.
    let mut best = (pairs[0].0, fbeta(total_pos, pairs.len() - total_pos, 0, beta));
    let (mut tp, mut fp) = (total_pos, pairs.len() - total_pos);
    let mut i = 0;
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                tp -= 1;
            } else {
                fp -= 1;
            }
            i += 1;
        }
        let threshold = if i < pairs.len() {
            v + (pairs[i].0 - v) / 2.0
        } else {
            v + 1.0
        };
        let f = fbeta(tp, fp, total_pos - tp, beta);
        if f > best.1 * (1.0 + FBETA_TIE) {
            best = (threshold, f);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicMetrics {
    pub topic_id: String,
    /// `None` when the topic has no positive among labeled pairs.
    pub ap: Option<f64>,
    pub num_positives: usize,
    pub num_labeled: usize,
    pub threshold: Option<f64>,
    pub fbeta: Option<f64>,
    /// Best F1 over all thresholds.
    pub best_f1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_map: f64,
    pub weighted_map: f64,
    pub micro_ap: f64,
    pub macro_best_f1: f64,
    pub beta: f64,
    pub num_labeled_pairs: usize,
    pub per_topic: Vec<TopicMetrics>,
    /// Topics without positives, left out of the macro and weighted means.
    pub excluded: Vec<String>,
}

/// Metrics over a dense view where `None` marks unlabeled pairs.
pub fn aggregate_dense(
    scores: &[Vec<f64>],
    labels: &[Vec<Option<bool>>],
    topic_ids: &[String],
    beta: f64,
) -> Result<EvalReport> {
    if scores.len() != labels.len()
        || scores.iter().zip(labels).any(|(s, l)| s.len() != topic_ids.len() || l.len() != topic_ids.len())
    {
        return Err(Error::dim("aggregate", "score and label matrices differ in shape"));
    }
    if !(beta > 0.0) {
        return Err(Error::Config(format!("beta must be positive, got {beta}")));
    }
    let mut per_topic = Vec::with_capacity(topic_ids.len());
    let mut excluded = Vec::new();
    let (mut flat_s, mut flat_l) = (Vec::new(), Vec::new());
    for (srow, lrow) in scores.iter().zip(labels) {
        for (s, l) in srow.iter().zip(lrow) {
            if let Some(l) = l {
                flat_s.push(*s);
                flat_l.push(*l);
            }
        }
    }
    if flat_l.is_empty() {
        return Err(Error::Empty("no labeled pairs to evaluate".into()));
    }
    let micro_ap = average_precision(&flat_s, &flat_l)
        .ok_or_else(|| Error::Precondition("no positive labels to evaluate".into()))?;

    for (j, topic_id) in topic_ids.iter().enumerate() {
        let (mut s, mut l) = (Vec::new(), Vec::new());
        for (srow, lrow) in scores.iter().zip(labels) {
            if let Some(lab) = lrow[j] {
                s.push(srow[j]);
                l.push(lab);
            }
        }
        let num_positives = l.iter().filter(|&&x| x).count();
        let ap = average_precision(&s, &l);
        let (threshold, fb, best_f1) = if ap.is_some() {
            let (t, f) = select_threshold(&s, &l, beta)?;
            (Some(t), Some(f), Some(select_threshold(&s, &l, 1.0)?.1))
        } else {
            excluded.push(topic_id.clone());
            (None, None, None)
        };
        per_topic.push(TopicMetrics {
            topic_id: topic_id.clone(),
            ap,
            num_positives,
            num_labeled: l.len(),
            threshold,
            fbeta: fb,
            best_f1,
        });
    }
    let defined: Vec<&TopicMetrics> = per_topic.iter().filter(|t| t.ap.is_some()).collect();
    let n = defined.len() as f64;
    let macro_map = defined.iter().filter_map(|t| t.ap).sum::<f64>() / n;
    let total_pos: usize = defined.iter().map(|t| t.num_positives).sum();
    let weighted_map = defined
        .iter()
        .map(|t| t.ap.unwrap_or(0.0) * t.num_positives as f64)
        .sum::<f64>()
        / total_pos as f64;
    let macro_best_f1 = defined.iter().filter_map(|t| t.best_f1).sum::<f64>() / n;
    if !excluded.is_empty() {
        log::warn!("{} topic(s) without positives excluded from averages", excluded.len());
    }
    Ok(EvalReport {
        macro_map,
        weighted_map,
        micro_ap,
        macro_best_f1,
        beta,
        num_labeled_pairs: flat_l.len(),
        per_topic,
        excluded,
    })
}

pub fn aggregate(scores: &ScoreMatrix, labels: &PartialLabelMatrix, beta: f64) -> Result<EvalReport> {
    scores.validate()?;
    let dense = labels.dense(&scores.text_ids, &scores.topic_ids);
    aggregate_dense(&scores.scores, &dense, &scores.topic_ids, beta)
}

/// Score of the chance baseline for micro AP: the positive rate.
pub fn positive_rate(labels: &PartialLabelMatrix) -> f64 {
    let pos = labels.iter().filter(|(_, _, l)| *l).count();
    pos as f64 / labels.len().max(1) as f64
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// `topic_id,AP,NP,threshold,fbeta`; undefined values are empty.
    pub fn write_topic_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["topic_id", "AP", "NP", "threshold", "fbeta"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.per_topic {
            csv.write_record([
                t.topic_id.clone(),
                opt(t.ap),
                t.num_positives.to_string(),
                opt(t.threshold),
                opt(t.fbeta),
            ])?;
        }
        csv.flush()?;
        Ok(())
    }
}
