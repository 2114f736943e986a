use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::nncore::INIT_STD;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Cross,
    BiCosine,
    BiConcat,
}

/// How pooled topic (`U`) and text (`V`) embeddings are merged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinationMode {
    Cosine,
    Concat,
    ConcatSub,
    ConcatSubMult,
}

impl CombinationMode {
    /// Width of the combined vector, `None` for cosine.
    pub fn width(self, d_model: usize) -> Option<usize> {
        match self {
            CombinationMode::Cosine => None,
            CombinationMode::Concat => Some(2 * d_model),
            CombinationMode::ConcatSub => Some(3 * d_model),
            CombinationMode::ConcatSubMult => Some(4 * d_model),
        }
    }
}

/// What the encoder sees for a topic.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicRendering {
    /// `"name: description"`
    #[default]
    NameDescription,
    Description,
}

impl TopicRendering {
    pub fn render(self, name: &str, description: &str) -> String {
        match self {
            TopicRendering::NameDescription => format!("{name}: {description}"),
            TopicRendering::Description => description.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Required for `bi_concat`; implied for `bi_cosine`; absent for `cross`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combination: Option<CombinationMode>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default = "default_head_dropout")]
    pub head_dropout: f64,
    #[serde(default)]
    pub topic_rendering: TopicRendering,
    /// Standard deviation of the truncated-normal weight initialisation.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    INIT_STD
}

fn default_head_dropout() -> f64 {
    0.1
}

/// Short names accepted by [`ModelConfig::preset`].
pub const MODEL_NAMES: [&str; 5] = [
    "cross",
    "bi_cosine",
    "bi_concat",
    "bi_concat_sub",
    "bi_concat_sub_mult",
];

impl ModelConfig {
    /// Default configuration for a short model name, with mean pooling for
    /// cosine and CLS pooling for the others.
    pub fn preset(name: &str, encoder: EncoderConfig) -> Result<Self> {
        let (architecture, combination) = match name {
            "cross" => (Architecture::Cross, None),
            "bi_cosine" => (Architecture::BiCosine, Some(CombinationMode::Cosine)),
            "bi_concat" => (Architecture::BiConcat, Some(CombinationMode::Concat)),
            "bi_concat_sub" => (Architecture::BiConcat, Some(CombinationMode::ConcatSub)),
            "bi_concat_sub_mult" => (Architecture::BiConcat, Some(CombinationMode::ConcatSubMult)),
            other => return Err(Error::Config(format!("unknown model name {other}"))),
        };
        let pooling = if architecture == Architecture::BiCosine {
            Pooling::Mean
        } else {
            Pooling::Cls
        };
        let cfg = Self {
            architecture,
            combination,
            encoder: EncoderConfig { pooling, ..encoder },
            head_dropout: default_head_dropout(),
            topic_rendering: TopicRendering::default(),
            init_std: INIT_STD,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn name(&self) -> &'static str {
        match (self.architecture, self.combination) {
            (Architecture::Cross, _) => "cross",
            (Architecture::BiCosine, _) => "bi_cosine",
            (Architecture::BiConcat, Some(CombinationMode::Concat)) => "bi_concat",
            (Architecture::BiConcat, Some(CombinationMode::ConcatSub)) => "bi_concat_sub",
            _ => "bi_concat_sub_mult",
        }
    }

    pub fn is_bi_encoder(&self) -> bool {
        self.architecture != Architecture::Cross
    }

    pub fn combination_mode(&self) -> Option<CombinationMode> {
        match self.architecture {
            Architecture::Cross => None,
            Architecture::BiCosine => Some(CombinationMode::Cosine),
            Architecture::BiConcat => self.combination,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config(format!("init_std {} must be positive", self.init_std)));
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config(format!("head_dropout {} outside [0, 1)", self.head_dropout)));
        }
        match (self.architecture, self.combination) {
            (Architecture::Cross, None) => {}
            (Architecture::Cross, Some(_)) => {
                return Err(Error::Config("cross architecture takes no combination mode".into()))
            }
            (Architecture::BiCosine, None | Some(CombinationMode::Cosine)) => {}
            (Architecture::BiCosine, Some(m)) => {
                return Err(Error::Config(format!("bi_cosine cannot use combination {m:?}")))
            }
            (Architecture::BiConcat, None | Some(CombinationMode::Cosine)) => {
                return Err(Error::Config(
                    "bi_concat needs combination concat, concat_sub or concat_sub_mult".into(),
                ))
            }
            (Architecture::BiConcat, Some(_)) => {}
        }
        if self.architecture == Architecture::Cross && self.encoder.pooling != Pooling::Cls {
            return Err(Error::Config("cross architecture uses CLS pooling".into()));
        }
        Ok(())
    }
}
