//! Run configuration: one TOML file, dotted `key=value` overrides, full
//! validation and a provenance-tagged dump.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusFormat;
use crate::error::{Error, Result};
use crate::fusion::{AblationFlags, GenerationConfig, ModelConfig};
use crate::pipeline::PipelineSettings;
use crate::retriever::RetrieverConfig;
use crate::training::TrainingConfig;

/// Overrides `paths.artifact_root`.
pub const ARTIFACT_ROOT_ENV: &str = "PRCCF_ARTIFACT_ROOT";

/// Keys whose defaults come from the published training setup.
pub const PAPER_KEYS: [&str; 17] = [
    "split.train",
    "split.val",
    "split.test",
    "retriever.pairs",
    "retriever.max_prompt_tokens",
    "model.max_positions",
    "model.max_target",
    "training.lr",
    "training.beta1",
    "training.beta2",
    "training.batch_size",
    "training.eval_batch_size",
    "training.epochs",
    "generation.top_k",
    "generation.top_p",
    "generation.repetition_penalty",
    "generation.max_new_tokens",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub artifact_root: PathBuf,
    pub corpus: PathBuf,
    pub corpus_format: CorpusFormat,
    pub personas: Option<PathBuf>,
    pub strategies: Option<PathBuf>,
    pub knowledge: PathBuf,
    pub cause_cache: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            artifact_root: "artifacts".into(),
            corpus: "data/corpus.jsonl".into(),
            corpus_format: CorpusFormat::Canonical,
            personas: None,
            strategies: None,
            knowledge: "data/knowledge.jsonl".into(),
            cause_cache: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub dimension: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dimension: 256,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CognitionConfig {
    pub k: usize,
    pub filter_markers: Vec<String>,
    pub cause_keywords: Vec<String>,
}

impl Default for CognitionConfig {
    fn default() -> Self {
        Self {
            k: 5,
            filter_markers: vec!["unrelated".into(), "random".into()],
            cause_keywords: vec!["because".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub max_context_turns: usize,
    pub vocab_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            max_context_turns: 8,
            vocab_size: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub split: SplitConfig,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub retriever: RetrieverConfig,
    pub cognition: CognitionConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub generation: GenerationConfig,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            paths: Paths::default(),
            split: SplitConfig::default(),
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            retriever: RetrieverConfig::default(),
            cognition: CognitionConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            generation: GenerationConfig::default(),
            ablation: AblationFlags::full(),
        }
    }
}

/// Fixed offsets added to the run seed per stage.
pub mod seed_offset {
    pub const SPLIT: u64 = 0;
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const SAMPLING: u64 = 3;
}

impl RunConfig {
    /// Parses `text`, applies `overrides` (`a.b=value`, value parsed as a
    /// TOML literal or else taken as a string) and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(vec![format!("config parse error: {e}")]))?;
        let mut problems = Vec::new();
        for o in overrides {
            if let Err(e) = apply_override(&mut tree, o) {
                problems.push(e);
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| {
                Error::Config(vec![format!("cannot read config {}: {e}", p.display())])
            })?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Ok(root) = std::env::var(ARTIFACT_ROOT_ENV) {
            if !root.is_empty() {
                cfg.paths.artifact_root = root.into();
            }
        }
        Ok(cfg)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let s = self.split;
        if [s.train, s.val, s.test].iter().any(|r| !(0.0..=1.0).contains(r))
            || (s.train + s.val + s.test - 1.0).abs() > 1e-9
        {
            v.push(format!(
                "split ratios must lie in [0, 1] and sum to 1 (got {}, {}, {})",
                s.train, s.val, s.test
            ));
        }
        if self.data.max_context_turns == 0 {
            v.push("data.max_context_turns must be >= 1".into());
        }
        if self.data.vocab_size <= 16 {
            v.push("data.vocab_size must exceed the 16 reserved tokens".into());
        }
        if self.encoder.dimension == 0 {
            v.push("encoder.dimension must be >= 1".into());
        }
        v.extend(self.retriever.violations());
        if self.cognition.k == 0 {
            v.push("cognition.k must be >= 1".into());
        }
        let m = self.model;
        if m.hidden == 0 || m.heads == 0 || !m.hidden.is_multiple_of(m.heads) {
            v.push(format!(
                "model.hidden ({}) must be a positive multiple of model.heads ({})",
                m.hidden, m.heads
            ));
        }
        if m.layers == 0 || m.cognition_layers == 0 || m.ff == 0 {
            v.push("model.layers, model.cognition_layers and model.ff must be >= 1".into());
        }
        if m.max_positions == 0 || m.max_target < 2 {
            v.push("model.max_positions must be >= 1 and model.max_target >= 2".into());
        }
        v.extend(self.training.violations());
        v.extend(self.generation.violations());
        v.extend(self.ablation.violations());
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations() {
            v if v.is_empty() => Ok(()),
            v => Err(Error::Config(v)),
        }
    }

    pub fn pipeline_settings(&self) -> PipelineSettings {
        PipelineSettings {
            retriever: self.retriever,
            flags: self.ablation,
            k: self.cognition.k,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the serialized config with artifact paths and
    /// generation-only settings left out.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        c.generation = GenerationConfig::default();
        hex(&Sha256::digest(c.to_toml().as_bytes()))
    }

    /// `key = value  # paper|repo-default|override` for every leaf.
    pub fn dump_with_provenance(&self) -> String {
        let defaults = flatten(&toml::Value::try_from(RunConfig::default()).expect("serializes"));
        let mut out = String::new();
        for (key, value) in flatten(&toml::Value::try_from(self).expect("serializes")) {
            let default = defaults.iter().find(|(k, _)| *k == key).map(|(_, v)| v);
            let tag = if default != Some(&value) {
                "override"
            } else if PAPER_KEYS.contains(&key.as_str()) {
                "paper"
            } else {
                "repo-default"
            };
            out.push_str(&format!("{key} = {value}  # {tag}\n"));
        }
        out
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.paths.artifact_root.join(name)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn flatten(v: &toml::Value) -> Vec<(String, String)> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
        match v {
            toml::Value::Table(t) => {
                for (k, child) in t {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}.{k}")
                    };
                    walk(&key, child, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let mut out = Vec::new();
    walk("", v, &mut out);
    out
}

fn apply_override(tree: &mut toml::Table, spec: &str) -> std::result::Result<(), String> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not of the form key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override key `{key}` is malformed"));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| format!("override key `{key}`: `{p}` is not a section"))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_published_constants() {
        let c = RunConfig::default();
        assert_eq!(c.model.max_positions, 512);
        assert_eq!(c.retriever.max_prompt_tokens, 512);
        assert_eq!(c.model.max_target, 50);
        assert_eq!(c.generation.max_new_tokens, 50);
        assert_eq!(c.training.lr, 1.5e-5);
        assert_eq!((c.training.beta1, c.training.beta2), (0.9, 0.999));
        assert_eq!((c.training.batch_size, c.training.eval_batch_size), (8, 16));
        assert_eq!(c.training.epochs, 10);
        assert_eq!(c.generation.top_k, 10);
        assert_eq!(c.generation.top_p, 0.9);
        assert_eq!(c.generation.repetition_penalty, 1.03);
        assert_eq!(c.retriever.pairs, 5);
        assert_eq!((c.split.train, c.split.val, c.split.test), (0.8, 0.1, 0.1));
    }

    #[test]
    fn overrides_and_validation() {
        let c = RunConfig::from_toml("", &["retriever.beta=0.0".into(), "paths.corpus=x.jsonl".into()]).unwrap();
        assert_eq!(c.retriever.beta, 0.0);
        assert_eq!(c.paths.corpus, PathBuf::from("x.jsonl"));
        match RunConfig::from_toml("", &["generation.top_k=0".into(), "training.epochs=0".into()]) {
            Err(Error::Config(v)) => assert_eq!(v.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(RunConfig::from_toml("", &["retriever.gamma=1".into()]).is_err());
    }

    #[test]
    fn dump_tags_provenance() {
        let c = RunConfig::from_toml("", &["seed=7".into()]).unwrap();
        let d = c.dump_with_provenance();
        assert!(d.contains("training.lr = 0.000015  # paper"), "{d}");
        assert!(d.contains("seed = 7  # override"));
        assert!(d.contains("cognition.k = 5  # repo-default"));
    }
}
