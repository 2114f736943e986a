//! Test mAP as a function of the number of positive annotations per topic.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split};
use crate::encoder::Vocabulary;
use crate::error::{Error, Result};
use crate::models::{Model, ModelConfig};
use crate::training::{evaluate, train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaturationRow {
    pub n_positives: usize,
    #[serde(rename = "macro_mAP")]
    pub macro_map: f64,
    #[serde(rename = "micro_mAP")]
    pub micro_map: f64,
    /// Topics trained and scored at this count.
    pub topics: Vec<String>,
    pub best_epoch: usize,
}

/// Keeps `n` training positives per topic and the same fraction of that
/// topic's training negatives, so each topic keeps its positive rate.
/// Positives and negatives are prefixes of seeded per-topic shuffles, so a
/// larger count keeps a superset of a smaller one. Labels of non-training
/// texts are untouched. Topics with fewer than `n` training positives are
/// returned separately.
pub fn subsample_annotations(dataset: &Dataset, train_ids: &[String], n: usize, seed: u64) -> (Dataset, Vec<String>) {
    let train: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
    let mut by_topic: BTreeMap<&str, [Vec<&str>; 2]> = BTreeMap::new();
    for (x, t, l) in dataset.labels.iter() {
        if train.contains(x) {
            by_topic.entry(t).or_default()[usize::from(l)].push(x);
        }
    }
    let mut keep: HashSet<(&str, &str)> = HashSet::new();
    let mut short = Vec::new();
    for (k, topic) in dataset.topics.iter().enumerate() {
        let [mut neg, mut pos] = by_topic.remove(topic.topic_id.as_str()).unwrap_or_default();
        if pos.len() < n {
            short.push(topic.topic_id.clone());
            continue;
        }
        let n_neg = (neg.len() as f64 * n as f64 / pos.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9));
        for (ids, m) in [(&mut pos, n), (&mut neg, n_neg)] {
            ids.sort_unstable();
            ids.shuffle(&mut rng);
            keep.extend(ids[..m].iter().map(|&x| (x, topic.topic_id.as_str())));
        }
    }
    let labels = dataset.labels.filter(|x, t, _| !train.contains(x) || keep.contains(&(x, t)));
    let mut out = dataset.clone();
    out.labels = labels;
    (out, short)
}

/// Training pairs available to `train_ids`.
fn train_pairs(dataset: &Dataset, train_ids: &[String]) -> usize {
    let train: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
    dataset.labels.iter().filter(|(x, _, _)| train.contains(x)).count()
}

/// Stretches epochs and patience by `full / reduced` so every count gets
/// the optimizer steps of a full-data run.
pub fn equal_step_budget(cfg: &TrainConfig, full: usize, reduced: usize) -> TrainConfig {
    let scale = full as f64 / reduced.max(1) as f64;
    let stretch = |v: usize| ((v as f64 * scale).ceil() as usize).max(v);
    TrainConfig {
        max_epochs: stretch(cfg.max_epochs),
        patience: stretch(cfg.patience),
        ..cfg.clone()
    }
}

/// One fresh training run per count, all with the same seed and the same
/// optimizer step budget, evaluated on the full test labels of the topics
/// that had enough positives.
pub fn saturation(
    model_config: &ModelConfig,
    vocab: &Vocabulary,
    train_config: &TrainConfig,
    dataset: &Dataset,
    split: &Split,
    counts: &[usize],
    beta: f64,
) -> Result<Vec<SaturationRow>> {
    if counts.is_empty() {
        return Err(Error::Empty("no annotation counts requested".into()));
    }
    let mut rows = Vec::with_capacity(counts.len());
    for &n in counts {
        let (reduced, short) = subsample_annotations(dataset, &split.train, n, train_config.seed);
        for t in &short {
            log::warn!("topic {t} has fewer than {n} training positives; skipped at this count");
        }
        let topics: Vec<String> = dataset
            .topic_ids()
            .into_iter()
            .filter(|t| !short.contains(t))
            .collect();
        if topics.is_empty() {
            log::warn!("no topic has {n} training positives; count skipped");
            continue;
        }
        let reduced = reduced.with_topics(&topics);
        let full = dataset.with_topics(&topics);
        let cfg = equal_step_budget(
            train_config,
            train_pairs(&full, &split.train),
            train_pairs(&reduced, &split.train),
        );
        log::info!("n_positives {n}: up to {} epochs, patience {}", cfg.max_epochs, cfg.patience);
        let mut model = Model::new(model_config.clone(), vocab.clone(), train_config.seed)?;
        let outcome = train(&mut model, &reduced, &split.train, &split.val, &cfg, &mut |_| {})?;
        let report = evaluate(&model, &full, &split.test, beta)?;
        log::info!(
            "n_positives {n}: macro {:.4} micro {:.4}",
            report.macro_map,
            report.micro_ap
        );
        rows.push(SaturationRow {
            n_positives: n,
            macro_map: report.macro_map,
            micro_map: report.micro_ap,
            topics,
            best_epoch: outcome.best_epoch,
        });
    }
    Ok(rows)
}

/// `n_positives,macro_mAP,micro_mAP`
pub fn write_saturation_csv<W: Write>(rows: &[SaturationRow], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["n_positives", "macro_mAP", "micro_mAP"])?;
    for r in rows {
        csv.write_record([
            r.n_positives.to_string(),
            format!("{:.6}", r.macro_map),
            format!("{:.6}", r.micro_map),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate, SynthConfig};
    use crate::data::stratified_split;

    fn fixture() -> (Dataset, Split) {
        let ds = generate(&SynthConfig {
            num_texts: 400,
            seed: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        let split = stratified_split(&ds.texts, &ds.labels, [0.7, 0.15, 0.15], 5).unwrap();
        (ds, split)
    }

    fn train_labels<'a>(ds: &'a Dataset, split: &Split) -> Vec<(&'a str, &'a str, bool)> {
        let train: HashSet<&str> = split.train.iter().map(String::as_str).collect();
        ds.labels.iter().filter(|(x, _, _)| train.contains(x)).collect()
    }

    #[test]
    fn subsampling_is_nested_and_keeps_positive_rates() {
        let (ds, split) = fixture();
        let (small, _) = subsample_annotations(&ds, &split.train, 5, 1);
        let (large, _) = subsample_annotations(&ds, &split.train, 12, 1);
        let small_set: HashSet<_> = train_labels(&small, &split).into_iter().collect();
        let large_set: HashSet<_> = train_labels(&large, &split).into_iter().collect();
        assert!(small_set.is_subset(&large_set));

        let full = train_labels(&ds, &split);
        for topic in ds.topic_ids() {
            let count = |rows: &HashSet<(&str, &str, bool)>, l: bool| {
                rows.iter().filter(|r| r.1 == topic && r.2 == l).count()
            };
            let all: HashSet<_> = full.iter().copied().collect();
            let (pos, neg) = (count(&all, true), count(&all, false));
            assert_eq!(count(&small_set, true), 5, "{topic}");
            let want = (neg as f64 * 5.0 / pos as f64).round() as usize;
            assert_eq!(count(&small_set, false), want, "{topic}");
        }

        let non_train = |d: &Dataset| {
            let train: HashSet<&str> = split.train.iter().map(String::as_str).collect();
            d.labels.filter(|x, _, _| !train.contains(x))
        };
        assert_eq!(non_train(&small), non_train(&ds));
    }

    #[test]
    fn topics_short_of_positives_are_reported() {
        let (ds, split) = fixture();
        let (reduced, short) = subsample_annotations(&ds, &split.train, 100_000, 1);
        assert_eq!(short, ds.topic_ids());
        assert!(train_labels(&reduced, &split).is_empty());
    }

    #[test]
    fn step_budget_scales_epochs_and_patience() {
        let cfg = TrainConfig {
            max_epochs: 6,
            patience: 3,
            ..TrainConfig::default()
        };
        let stretched = equal_step_budget(&cfg, 100, 25);
        assert_eq!((stretched.max_epochs, stretched.patience), (24, 12));
        let same = equal_step_budget(&cfg, 100, 100);
        assert_eq!(same, cfg);
    }
}
