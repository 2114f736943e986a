use std::collections::{BTreeMap, BTreeSet, HashMap};

use indexmap::{IndexMap, IndexSet};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Topic;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    /// Minimum score for a text to be eligible for a topic.
    pub threshold: f64,
    /// Per-topic threshold overrides.
    pub topic_thresholds: BTreeMap<String, f64>,
    /// Texts drawn per topic among the eligible ones.
    pub per_topic_samples: usize,
    /// Probability that a selected text also gets one random other group.
    pub random_group_rate: f64,
    /// Texts drawn uniformly from the whole corpus with a random group.
    pub random_text_count: usize,
    pub seed: u64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            topic_thresholds: BTreeMap::new(),
            per_topic_samples: 10,
            random_group_rate: 1.0,
            random_text_count: 0,
            seed: 0,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |t: f64| !(0.0..=1.0).contains(&t);
        if bad(self.threshold) || self.topic_thresholds.values().any(|&t| bad(t)) {
            return Err(Error::Config("planning thresholds must lie in [0, 1]".into()));
        }
        if bad(self.random_group_rate) {
            return Err(Error::Config("random_group_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A text with the question groups workers must answer for it, plus the
/// topic sets each worker selected.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub text_id: String,
    pub group_ids: Vec<String>,
    #[serde(default)]
    pub responses: Vec<BTreeSet<String>>,
}

/// One line of `tasks.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub text_id: String,
    pub group_ids: Vec<String>,
}

impl From<&AnnotationTask> for TaskRecord {
    fn from(t: &AnnotationTask) -> Self {
        Self {
            text_id: t.text_id.clone(),
            group_ids: t.group_ids.clone(),
        }
    }
}

/// Draws `k` items without replacement with probability proportional to
/// weight (Efraimidis–Spirakis keys `u^(1/w)`).
fn weighted_sample(rng: &mut ChaCha8Rng, items: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = items
        .iter()
        .filter(|(_, w)| *w > 0.0)
        .map(|&(i, w)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (u.ln() / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Builds annotation tasks from model scores. `scores[i][j]` belongs to
/// `text_ids[i]` and `topics[j]`.
pub fn plan_annotation(
    text_ids: &[String],
    topics: &[Topic],
    scores: &[Vec<f64>],
    config: &PlanConfig,
) -> Result<Vec<AnnotationTask>> {
    config.validate()?;
    if scores.len() != text_ids.len() || scores.iter().any(|r| r.len() != topics.len()) {
        return Err(Error::dim("plan_annotation", "score matrix does not match texts × topics"));
    }
    if scores.iter().flatten().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(Error::Precondition("scores must lie in [0, 1]".into()));
    }
    let groups: Vec<&str> = topics
        .iter()
        .map(|t| t.group_id.as_str())
        .collect::<IndexSet<_>>()
        .into_iter()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut assigned: IndexMap<usize, IndexSet<&str>> = IndexMap::new();

    for (j, topic) in topics.iter().enumerate() {
        let threshold = config
            .topic_thresholds
            .get(&topic.topic_id)
            .copied()
            .unwrap_or(config.threshold);
        let eligible: Vec<(usize, f64)> = (0..text_ids.len())
            .filter(|&i| scores[i][j] >= threshold)
            .map(|i| (i, scores[i][j]))
            .collect();
        for i in weighted_sample(&mut rng, &eligible, config.per_topic_samples) {
            let set = assigned.entry(i).or_default();
            set.insert(topic.group_id.as_str());
            if rng.random::<f64>() < config.random_group_rate {
                let others: Vec<&str> = groups.iter().copied().filter(|g| !set.contains(g)).collect();
                if let Some(g) = others.choose(&mut rng) {
                    set.insert(g);
                }
            }
        }
    }

    let mut pool: Vec<usize> = (0..text_ids.len()).collect();
    pool.shuffle(&mut rng);
    for &i in pool.iter().take(config.random_text_count) {
        let set = assigned.entry(i).or_default();
        let others: Vec<&str> = groups.iter().copied().filter(|g| !set.contains(g)).collect();
        if let Some(g) = others.choose(&mut rng) {
            set.insert(g);
        }
    }

    assigned.sort_keys();
    Ok(assigned
        .into_iter()
        .filter(|(_, gs)| !gs.is_empty())
        .map(|(i, gs)| AnnotationTask {
            text_id: text_ids[i].clone(),
            group_ids: gs.into_iter().map(str::to_string).collect(),
            responses: Vec::new(),
        })
        .collect())
}

/// Labels every topic of the task's groups: positive iff at least two of
/// the three workers selected it.
pub fn majority_vote(task: &AnnotationTask, topics: &[Topic]) -> Result<Vec<(String, String, bool)>> {
    if task.responses.len() != 3 {
        return Err(Error::Task(format!(
            "text {} has {} responses, expected 3",
            task.text_id,
            task.responses.len()
        )));
    }
    let in_scope: HashMap<&str, &Topic> = topics
        .iter()
        .filter(|t| task.group_ids.contains(&t.group_id))
        .map(|t| (t.topic_id.as_str(), t))
        .collect();
    for r in &task.responses {
        if let Some(stray) = r.iter().find(|t| !in_scope.contains_key(t.as_str())) {
            return Err(Error::Task(format!(
                "text {} response selects {stray}, which is outside its groups",
                task.text_id
            )));
        }
    }
    Ok(topics
        .iter()
        .filter(|t| in_scope.contains_key(t.topic_id.as_str()))
        .map(|t| {
            let votes = task.responses.iter().filter(|r| r.contains(&t.topic_id)).count();
            (task.text_id.clone(), t.topic_id.clone(), votes >= 2)
        })
        .collect())
}
