//! The single JSON document configuring a run.

use crate::error::{Error, Result};
use crate::model::BackboneConfig;
use crate::oracle::OracleTask;
use crate::ppo::PpoConfig;
use crate::reward::RewardTrainConfig;
use crate::sampling::SamplerConfig;
use crate::sft::SftConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::path::Path;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptSetConfig {
    pub count: usize,
    pub eval_count: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for PromptSetConfig {
    fn default() -> Self {
        Self {
            count: 200,
            eval_count: 32,
            min_len: 2,
            max_len: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub k_responses: usize,
    pub max_response_tokens: usize,
    pub temperature: f64,
    pub top_k: Option<usize>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            k_responses: 5,
            max_response_tokens: 24,
            temperature: 1.0,
            top_k: None,
        }
    }
}

impl GenerationConfig {
    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            top_k: self.top_k,
            max_response_tokens: self.max_response_tokens,
            k_responses: self.k_responses,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotationConfig {
    /// Synthetic annotators per response on the oracle path.
    pub annotators: usize,
    /// Jitter applied to oracle quality before mapping to rubric levels.
    pub noise: f64,
    pub lease_minutes: u64,
}

impl Default for AnnotationConfig {
    fn default() -> Self {
        Self {
            annotators: 3,
            noise: 0.0,
            lease_minutes: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_prompt: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples_per_prompt: 4 }
    }
}

/// File names inside the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPaths {
    pub prompts: String,
    pub eval_prompts: String,
    pub responses: String,
    pub annotations: String,
    pub rankings: String,
    pub pairs: String,
    pub journal: String,
    pub sft_checkpoint: String,
    pub reward_checkpoint: String,
    pub actor_checkpoint: String,
    pub critic_checkpoint: String,
    pub metrics: String,
    pub reward_curve: String,
    pub evaluation: String,
}

impl Default for RunPaths {
    fn default() -> Self {
        Self {
            prompts: "prompts.jsonl".into(),
            eval_prompts: "eval_prompts.jsonl".into(),
            responses: "responses.jsonl".into(),
            annotations: "annotations.jsonl".into(),
            rankings: "rankings.jsonl".into(),
            pairs: "pairs.jsonl".into(),
            journal: "annotation_journal.jsonl".into(),
            sft_checkpoint: "sft.ckpt".into(),
            reward_checkpoint: "reward.ckpt".into(),
            actor_checkpoint: "actor.ckpt".into(),
            critic_checkpoint: "critic.ckpt".into(),
            metrics: "metrics.csv".into(),
            reward_curve: "reward_curve.csv".into(),
            evaluation: "evaluation.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub config_version: u32,
    pub seed: u64,
    pub task: OracleTask,
    pub actor: BackboneConfig,
    pub prompts: PromptSetConfig,
    pub warm_start: SftConfig,
    pub generation: GenerationConfig,
    pub annotation: AnnotationConfig,
    pub reward: RewardTrainConfig,
    pub ppo: PpoConfig,
    pub evaluation: EvalConfig,
    pub paths: RunPaths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            seed: 0,
            task: OracleTask::sorted_sequence(16),
            actor: BackboneConfig::default(),
            prompts: PromptSetConfig::default(),
            warm_start: SftConfig::default(),
            generation: GenerationConfig::default(),
            annotation: AnnotationConfig::default(),
            reward: RewardTrainConfig::default(),
            ppo: PpoConfig::default(),
            evaluation: EvalConfig::default(),
            paths: RunPaths::default(),
        }
    }
}

/// Sets `dotted.key=value` in a JSON document. The key must already exist;
/// the value is parsed as JSON, falling back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let mut node = &mut *doc;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

impl RunConfig {
    /// Parses a config document, applying `overrides` before validation.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let doc: Value = serde_json::from_str(text).map_err(|e| Error::Schema(format!("config is not JSON: {e}")))?;
        let version = doc
            .get("config_version")
            .ok_or_else(|| Error::Config("missing `config_version`".into()))?;
        let found = version
            .as_u64()
            .ok_or_else(|| Error::Config("`config_version` must be an integer".into()))? as u32;
        if found != CONFIG_VERSION {
            return Err(Error::VersionMismatch {
                expected: CONFIG_VERSION,
                found,
            });
        }
        // Fill defaults first so overrides may target keys the file omits.
        let partial: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        partial.with_overrides(overrides)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_json(&text, overrides)
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.task.validate().map_err(wrap)?;
        self.actor.validate().map_err(wrap)?;
        if self.task.vocab_size != self.actor.vocab_size {
            return Err(Error::Config(format!(
                "task vocabulary {} differs from actor vocabulary {}",
                self.task.vocab_size, self.actor.vocab_size
            )));
        }
        let p = &self.prompts;
        if p.min_len == 0 || p.min_len > p.max_len || p.count == 0 {
            return Err(Error::Config(format!("bad prompt set {p:?}")));
        }
        let g = &self.generation;
        g.sampler(0).validate().map_err(wrap)?;
        if g.k_responses == 0 {
            return Err(Error::Config("generation.k_responses must be at least 1".into()));
        }
        let longest = g.max_response_tokens.max(self.ppo.max_response_tokens);
        if 1 + p.max_len + longest > self.actor.context_length {
            return Err(Error::Config(format!(
                "1 + {} prompt tokens + {longest} response tokens exceeds context length {}",
                p.max_len, self.actor.context_length
            )));
        }
        let w = &self.warm_start;
        if w.demo_min_len == 0 || w.demo_min_len > w.demo_max_len || 1 + p.max_len + w.demo_max_len + 1 > self.actor.context_length {
            return Err(Error::Config(format!(
                "bad demonstration lengths {}..={} for context length {}",
                w.demo_min_len, w.demo_max_len, self.actor.context_length
            )));
        }
        if self.annotation.annotators == 0 || !(self.annotation.noise >= 0.0) {
            return Err(Error::Config("annotation needs >= 1 annotator and noise >= 0".into()));
        }
        self.reward.validate().map_err(wrap)?;
        self.ppo.validate().map_err(wrap)?;
        if self.evaluation.samples_per_prompt == 0 {
            return Err(Error::Config("evaluation.samples_per_prompt must be at least 1".into()));
        }
        Ok(())
    }
}
