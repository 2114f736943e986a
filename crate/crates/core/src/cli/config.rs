//! Run configuration: one JSON document whose fields command-line flags
//! override, snapshotted as `resolved_config.json` next to every output.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::synthetic::SynthConfig;
use crate::data::PlanConfig;
use crate::encoder::{Activation, EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::explain::ExplainConfig;
use crate::models::{ModelConfig, TopicRendering};
use crate::serve::{BackfillConfig, BenchConfig, ServerConfig};
use crate::training::TrainConfig;

/// Name of the snapshot written into every output directory.
pub const RESOLVED_CONFIG: &str = "resolved_config.json";

/// A model preset plus the knobs the presets leave open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub encoder: EncoderConfig,
    /// Replaces the preset pooling of bi-encoders; the cross-encoder always
    /// reads the `[CLS]` position.
    pub pooling: Option<Pooling>,
    pub head_dropout: f64,
    pub init_std: f64,
    pub topic_rendering: TopicRendering,
}

/// Small encoder that trains in minutes on one core.
pub fn desk_encoder() -> EncoderConfig {
    EncoderConfig {
        d_model: 32,
        num_layers: 2,
        num_heads: 4,
        ffn_hidden: 64,
        max_len: 48,
        dropout: 0.0,
        activation: Activation::Gelu,
        pooling: Pooling::Mean,
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            name: "bi_concat_sub_mult".into(),
            encoder: desk_encoder(),
            pooling: Some(Pooling::Mean),
            head_dropout: 0.0,
            init_std: 0.1,
            topic_rendering: TopicRendering::default(),
        }
    }
}

impl ModelSpec {
    pub fn build(&self) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::preset(&self.name, self.encoder.clone())?;
        if let (Some(p), true) = (self.pooling, cfg.is_bi_encoder()) {
            cfg.encoder.pooling = p;
        }
        cfg.head_dropout = self.head_dropout;
        cfg.init_std = self.init_std;
        cfg.topic_rendering = self.topic_rendering;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything a subcommand may read. `seed` is copied into every section
/// that draws random numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub beta: f64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub min_freq: usize,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub zeroshot_folds: usize,
    pub saturation_counts: Vec<usize>,
    pub server: ServerConfig,
    pub backfill: BackfillConfig,
    pub bench: BenchConfig,
    pub explain: ExplainConfig,
    pub plan: PlanConfig,
}

/// Training recipe for the desk encoder.
pub fn desk_train() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        grad_accum_steps: 1,
        learning_rate: 1e-3,
        max_epochs: 6,
        ..TrainConfig::default()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            beta: 1.0,
            split: [0.7, 0.15, 0.15],
            min_freq: 1,
            model: ModelSpec::default(),
            train: desk_train(),
            synth: SynthConfig::default(),
            zeroshot_folds: 5,
            saturation_counts: vec![10, 50, 200],
            server: ServerConfig::default(),
            backfill: BackfillConfig::default(),
            bench: BenchConfig::default(),
            explain: ExplainConfig::default(),
            plan: PlanConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            detail: e.to_string(),
        })
    }

    /// Pushes the run seed into every seeded section.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.synth.seed = self.seed;
        self.bench.seed = self.seed;
        self.explain.seed = self.seed;
        self.plan.seed = self.seed;
    }

    /// Every problem with the configuration, not only the first.
    pub fn problems(&self) -> Vec<String> {
        let checks = [
            self.model.build().map(|_| ()),
            self.train.validate(),
            self.synth.validate(),
            self.server.validate(),
            self.explain.validate(),
            self.plan.validate(),
        ];
        let mut out: Vec<String> = checks.into_iter().filter_map(|r| r.err()).map(|e| e.to_string()).collect();
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            out.push(format!("beta must be positive, got {}", self.beta));
        }
        if self.split.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            out.push(format!("split {:?} must be fractions summing to 1", self.split));
        }
        if self.split[1] == 0.0 {
            out.push("validation fraction must be positive".into());
        }
        if self.min_freq == 0 {
            out.push("min_freq must be at least 1".into());
        }
        if self.zeroshot_folds < 2 {
            out.push("zeroshot_folds must be at least 2".into());
        }
        if self.saturation_counts.iter().any(|&c| c == 0) {
            out.push("saturation counts must be positive".into());
        }
        if self.backfill.window_size == 0 {
            out.push("backfill window_size must be positive".into());
        }
        if !(self.bench.price_per_min >= 0.0) {
            out.push("bench price_per_min must be non-negative".into());
        }
        out
    }
}

/// The snapshot: subcommand, resolved paths and the full configuration.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedConfig<'a> {
    pub subcommand: &'a str,
    pub paths: IndexMap<&'a str, PathBuf>,
    pub config: &'a RunConfig,
}

pub fn write_resolved(dir: &Path, resolved: &ResolvedConfig<'_>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(resolved)?;
    json.push('\n');
    std::fs::write(dir.join(RESOLVED_CONFIG), json)?;
    Ok(())
}
