//! Texts, topics, partial labels and the annotation workflow.

mod plan;
mod split;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use plan::{majority_vote, plan_annotation, AnnotationTask, PlanConfig, TaskRecord};
pub use split::{stratified_split, Split};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topic {
    pub topic_id: String,
    pub name: String,
    pub description: String,
    pub group_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextRecord {
    pub text_id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
}

/// One line of `annotations.jsonl`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub text_id: String,
    pub topic_id: String,
    pub label: u8,
}

/// Sparse binary labels; pairs that were never annotated are absent.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartialLabelMatrix {
    labels: BTreeMap<(String, String), bool>,
}

impl PartialLabelMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, text_id: impl Into<String>, topic_id: impl Into<String>, label: bool) {
        self.labels.insert((text_id.into(), topic_id.into()), label);
    }

    pub fn get(&self, text_id: &str, topic_id: &str) -> Option<bool> {
        self.labels.get(&(text_id.to_string(), topic_id.to_string())).copied()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(text_id, topic_id, label)` in key order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, bool)> {
        self.labels.iter().map(|((x, t), &l)| (x.as_str(), t.as_str(), l))
    }

    pub fn positives_per_topic(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (_, t, l) in self.iter() {
            if l {
                *out.entry(t.to_string()).or_default() += 1;
            }
        }
        out
    }

    /// Keeps entries whose text and topic pass the filters.
    pub fn filter(&self, mut keep: impl FnMut(&str, &str, bool) -> bool) -> Self {
        let labels = self
            .labels
            .iter()
            .filter(|((x, t), &l)| keep(x, t, l))
            .map(|(k, &l)| (k.clone(), l))
            .collect();
        Self { labels }
    }

    pub fn restrict_texts(&self, texts: &HashSet<&str>) -> Self {
        self.filter(|x, _, _| texts.contains(x))
    }

    pub fn restrict_topics(&self, topics: &HashSet<&str>) -> Self {
        self.filter(|_, t, _| topics.contains(t))
    }

    /// Dense `N × T` view in the given axis order.
    pub fn dense(&self, text_ids: &[String], topic_ids: &[String]) -> Vec<Vec<Option<bool>>> {
        text_ids
            .iter()
            .map(|x| topic_ids.iter().map(|t| self.get(x, t)).collect())
            .collect()
    }

    pub fn to_annotations(&self) -> Vec<Annotation> {
        self.iter()
            .map(|(x, t, l)| Annotation {
                text_id: x.to_string(),
                topic_id: t.to_string(),
                label: u8::from(l),
            })
            .collect()
    }
}

/// Texts, topics and partial labels that reference each other.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub texts: Vec<TextRecord>,
    pub topics: Vec<Topic>,
    pub labels: PartialLabelMatrix,
}

impl Dataset {
    pub fn new(texts: Vec<TextRecord>, topics: Vec<Topic>, labels: PartialLabelMatrix) -> Result<Self> {
        let ds = Self { texts, topics, labels };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut text_ids = HashSet::new();
        for t in &self.texts {
            if !text_ids.insert(t.text_id.as_str()) {
                return Err(Error::Config(format!("duplicate text_id {}", t.text_id)));
            }
        }
        let mut topic_ids = HashSet::new();
        for t in &self.topics {
            if !topic_ids.insert(t.topic_id.as_str()) {
                return Err(Error::Config(format!("duplicate topic_id {}", t.topic_id)));
            }
            if t.description.trim().is_empty() {
                return Err(Error::Config(format!("topic {} has an empty description", t.topic_id)));
            }
            if t.group_id.is_empty() {
                return Err(Error::Config(format!("topic {} has no group", t.topic_id)));
            }
        }
        for (x, t, _) in self.labels.iter() {
            if !text_ids.contains(x) {
                return Err(Error::Config(format!("label references unknown text {x}")));
            }
            if !topic_ids.contains(t) {
                return Err(Error::Config(format!("label references unknown topic {t}")));
            }
        }
        Ok(())
    }

    /// Reads `texts.jsonl`, `topics.jsonl` and `annotations.jsonl` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let texts = read_jsonl(&dir.join("texts.jsonl"))?;
        let topics = read_jsonl(&dir.join("topics.jsonl"))?;
        let annotations = read_jsonl(&dir.join("annotations.jsonl"))?;
        Self::new(texts, topics, labels_from_annotations(&annotations)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("texts.jsonl"), &self.texts)?;
        write_jsonl(&dir.join("topics.jsonl"), &self.topics)?;
        write_jsonl(&dir.join("annotations.jsonl"), &self.labels.to_annotations())
    }

    pub fn topic(&self, topic_id: &str) -> Option<&Topic> {
        self.topics.iter().find(|t| t.topic_id == topic_id)
    }

    pub fn groups(&self) -> BTreeSet<&str> {
        self.topics.iter().map(|t| t.group_id.as_str()).collect()
    }

    pub fn text_ids(&self) -> Vec<String> {
        self.texts.iter().map(|t| t.text_id.clone()).collect()
    }

    pub fn topic_ids(&self) -> Vec<String> {
        self.topics.iter().map(|t| t.topic_id.clone()).collect()
    }

    /// The subset whose texts are in `ids`, keeping the original order.
    pub fn subset(&self, ids: &[String]) -> Self {
        let keep: HashSet<&str> = ids.iter().map(String::as_str).collect();
        Self {
            texts: self
                .texts
                .iter()
                .filter(|t| keep.contains(t.text_id.as_str()))
                .cloned()
                .collect(),
            topics: self.topics.clone(),
            labels: self.labels.restrict_texts(&keep),
        }
    }

    /// The same texts with only `topic_ids` and their labels.
    pub fn with_topics(&self, topic_ids: &[String]) -> Self {
        let keep: HashSet<&str> = topic_ids.iter().map(String::as_str).collect();
        Self {
            texts: self.texts.clone(),
            topics: self
                .topics
                .iter()
                .filter(|t| keep.contains(t.topic_id.as_str()))
                .cloned()
                .collect(),
            labels: self.labels.restrict_topics(&keep),
        }
    }
}

pub fn labels_from_annotations(annotations: &[Annotation]) -> Result<PartialLabelMatrix> {
    let mut m = PartialLabelMatrix::new();
    for a in annotations {
        let label = match a.label {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Config(format!(
                    "label {other} for ({}, {}) is not 0 or 1",
                    a.text_id, a.topic_id
                )))
            }
        };
        m.insert(a.text_id.clone(), a.topic_id.clone(), label);
    }
    Ok(m)
}

/// One JSON object per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
