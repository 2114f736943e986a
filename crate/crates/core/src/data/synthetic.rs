//! Keyword-planted synthetic corpus.
//!
//! Every topic owns a few invented keywords, listed in its description.
//! A text is positive for a topic when it contains one of that topic's
//! keywords; a keyword preceded by `no` is a distractor and stays negative.
//! Labels are partial: a text is annotated only for the groups of its
//! positive topics plus randomly chosen extra groups.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, PartialLabelMatrix, TextRecord, Topic};
use crate::error::{Error, Result};

const SOURCES: [&str; 3] = ["review", "community", "partner"];
const NEGATION: &str = "no";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_texts: usize,
    pub num_topics: usize,
    pub num_groups: usize,
    pub keywords_per_topic: usize,
    pub filler_vocab: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a text has no positive topic.
    pub background_rate: f64,
    /// Probability that a topical text has a second positive topic.
    pub second_topic_rate: f64,
    /// Probability of a negated keyword from a non-positive topic.
    pub distractor_rate: f64,
    /// Keywords shared between consecutive topics.
    pub shared_keywords: usize,
    /// Extra random groups annotated per text.
    pub extra_groups: usize,
    /// Probability of flipping an annotated label.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_texts: 1200,
            num_topics: 12,
            num_groups: 4,
            keywords_per_topic: 3,
            filler_vocab: 150,
            min_words: 6,
            max_words: 14,
            background_rate: 0.2,
            second_topic_rate: 0.3,
            distractor_rate: 0.3,
            shared_keywords: 0,
            extra_groups: 1,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_topics == 0 || self.num_groups == 0 || self.num_groups > self.num_topics {
            return fail("need 1 ≤ num_groups ≤ num_topics");
        }
        if self.keywords_per_topic == 0 || self.shared_keywords >= self.keywords_per_topic {
            return fail("need keywords_per_topic > shared_keywords");
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return fail("need 1 ≤ min_words ≤ max_words");
        }
        for (name, p) in [
            ("background_rate", self.background_rate),
            ("second_topic_rate", self.second_topic_rate),
            ("distractor_rate", self.distractor_rate),
            ("label_noise", self.label_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Distinct pronounceable pseudo-words.
fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .flat_map(|_| [*C.choose(rng).unwrap() as char, *V.choose(rng).unwrap() as char])
            .collect();
        if w != NEGATION && taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = BTreeSet::new();
    let filler = pseudo_words(&mut rng, cfg.filler_vocab.max(1), &mut taken);
    let names = pseudo_words(&mut rng, cfg.num_topics, &mut taken);
    let own = cfg.keywords_per_topic - cfg.shared_keywords;
    let mut keywords: Vec<Vec<String>> = (0..cfg.num_topics)
        .map(|_| pseudo_words(&mut rng, own, &mut taken))
        .collect();
    for t in 0..cfg.num_topics {
        let next = (t + 1) % cfg.num_topics;
        let shared: Vec<String> = keywords[next][..cfg.shared_keywords.min(own)].to_vec();
        keywords[t].extend(shared);
    }

    let topics: Vec<Topic> = (0..cfg.num_topics)
        .map(|t| Topic {
            topic_id: format!("topic{:02}", t + 1),
            name: names[t].clone(),
            description: keywords[t].join(" "),
            group_id: format!("g{}", t % cfg.num_groups + 1),
        })
        .collect();
    let groups: Vec<String> = (0..cfg.num_groups).map(|g| format!("g{}", g + 1)).collect();

    let mut texts = Vec::with_capacity(cfg.num_texts);
    let mut labels = PartialLabelMatrix::new();
    for i in 0..cfg.num_texts {
        let mut positive = BTreeSet::new();
        if rng.random::<f64>() >= cfg.background_rate {
            positive.insert(rng.random_range(0..cfg.num_topics));
            if cfg.num_topics > 1 && rng.random::<f64>() < cfg.second_topic_rate {
                positive.insert(rng.random_range(0..cfg.num_topics));
            }
        }
        let len = rng.random_range(cfg.min_words..=cfg.max_words);
        let mut words: Vec<String> = (0..len).map(|_| filler.choose(&mut rng).unwrap().clone()).collect();
        for &t in &positive {
            let k = rng.random_range(1..=2.min(keywords[t].len()));
            for kw in keywords[t].choose_multiple(&mut rng, k) {
                let at = rng.random_range(0..=words.len());
                words.insert(at, kw.clone());
            }
        }
        if rng.random::<f64>() < cfg.distractor_rate {
            let t = rng.random_range(0..cfg.num_topics);
            let clean: Vec<&String> = keywords[t]
                .iter()
                .filter(|kw| !positive.iter().any(|&p| keywords[p].contains(kw)))
                .collect();
            if !positive.contains(&t) {
                if let Some(kw) = clean.choose(&mut rng) {
                    let at = rng.random_range(0..=words.len());
                    words.insert(at, (*kw).clone());
                    words.insert(at, NEGATION.to_string());
                }
            }
        }
        let text_id = format!("x{:05}", i + 1);
        texts.push(TextRecord {
            text_id: text_id.clone(),
            text: words.join(" "),
            source: SOURCES[i % SOURCES.len()].to_string(),
        });

        let mut annotated: BTreeSet<&str> = positive.iter().map(|&t| topics[t].group_id.as_str()).collect();
        let mut others: Vec<&String> = groups.iter().filter(|g| !annotated.contains(g.as_str())).collect();
        others.shuffle(&mut rng);
        let extra = if positive.is_empty() { cfg.extra_groups.max(1) } else { cfg.extra_groups };
        annotated.extend(others.into_iter().take(extra).map(String::as_str));
        for (t, topic) in topics.iter().enumerate() {
            if annotated.contains(topic.group_id.as_str()) {
                let mut label = positive.contains(&t);
                if rng.random::<f64>() < cfg.label_noise {
                    label = !label;
                }
                labels.insert(text_id.clone(), topic.topic_id.clone(), label);
            }
        }
    }
    Dataset::new(texts, topics, labels)
}
