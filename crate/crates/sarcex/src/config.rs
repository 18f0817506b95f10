//! TOML run configuration. Defaults follow the reference setup: N=256,
//! D_f=768, K=36, two GCN layers, AdamW at 1e-4 (backbone) and 1e-3
//! (graph, fusion, projection), 20 epochs of batch 16.

use std::path::{Path, PathBuf};

use sarcex_core::backbone::TinyConfig;
use sarcex_core::fusion::AttentionScale;
use sarcex_core::generator::{DecodeConfig, ModelConfig, TrainConfig, Variant};
use sarcex_core::optim::AdamWConfig;
use sarcex_core::reasoner::{Activation, GcnConfig};
use sarcex_core::visual::{DEFAULT_FEATURE_WIDTH, DEFAULT_MAX_OBJECTS, DEFAULT_PATCHES};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::ClientConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    pub paths: Paths,
    #[serde(default)]
    pub backends: Backends,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub decode: DecodeSection,
    #[serde(default)]
    pub knowledge: ClientConfig,
}

fn default_variant() -> Variant {
    Variant::Full
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub dataset: PathBuf,
    /// Enriched records, graphs, checkpoints and reports go here.
    pub work: PathBuf,
    /// Knowledge and visual caches; defaults to `<work>/cache`.
    pub cache: Option<PathBuf>,
    /// Concept fixture for the `fixture` knowledge backend.
    pub concept_fixture: Option<PathBuf>,
}

impl Paths {
    pub fn cache_dir(&self) -> PathBuf {
        self.cache.clone().unwrap_or_else(|| self.work.join("cache"))
    }

    pub fn knowledge_cache(&self) -> PathBuf {
        self.cache_dir().join("concepts.json")
    }

    pub fn visual_cache(&self) -> PathBuf {
        self.cache_dir().join("visual")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualKind {
    Stub,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnowledgeKind {
    Fixture,
    Conceptnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Hash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Backends {
    pub visual: VisualKind,
    pub visual_endpoint: Option<String>,
    pub visual_seed: u64,
    pub knowledge: KnowledgeKind,
    /// Overridden by `SARCEX_CONCEPTNET_URL` when set.
    pub knowledge_endpoint: Option<String>,
    pub embedding: EmbeddingKind,
    pub embedding_dim: usize,
}

impl Default for Backends {
    fn default() -> Self {
        Self {
            visual: VisualKind::Stub,
            visual_endpoint: None,
            visual_seed: 0,
            knowledge: KnowledgeKind::Fixture,
            knowledge_endpoint: None,
            embedding: EmbeddingKind::Hash,
            embedding_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub max_len: usize,
    pub width: usize,
    pub patches: usize,
    pub max_objects: usize,
    pub gcn_layers: usize,
    pub activation: Activation,
    /// Raw attention divisor `d_k`; `√D_f` when absent.
    pub attention_dk: Option<f64>,
    pub backbone_layers: usize,
    pub ffn_width: usize,
    pub max_target_len: usize,
    pub vocab_max: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            max_len: 256,
            width: DEFAULT_FEATURE_WIDTH,
            patches: DEFAULT_PATCHES,
            max_objects: DEFAULT_MAX_OBJECTS,
            gcn_layers: 2,
            activation: Activation::Relu,
            attention_dk: None,
            backbone_layers: 2,
            ffn_width: 4 * DEFAULT_FEATURE_WIDTH,
            max_target_len: 64,
            vocab_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_steps: Option<usize>,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            max_steps: None,
            lr_backbone: 1e-4,
            lr_head: 1e-3,
            weight_decay: 0.01,
            clip_norm: None,
            shuffle: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let d = DecodeConfig::default();
        Self {
            beam: d.beam,
            max_len: d.max_len,
            length_penalty: d.length_penalty,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses `path`; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        resolve(base, &mut cfg.paths.dataset);
        resolve(base, &mut cfg.paths.work);
        if let Some(c) = cfg.paths.cache.as_mut() {
            resolve(base, c);
        }
        if let Some(f) = cfg.paths.concept_fixture.as_mut() {
            resolve(base, f);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("model.max_len", m.max_len),
            ("model.width", m.width),
            ("model.patches", m.patches),
            ("model.gcn_layers", m.gcn_layers),
            ("model.backbone_layers", m.backbone_layers),
            ("model.ffn_width", m.ffn_width),
            ("model.max_target_len", m.max_target_len),
            ("train.batch_size", self.train.batch_size),
            ("decode.beam", self.decode.beam),
            ("decode.max_len", self.decode.max_len),
            ("backends.embedding_dim", self.backends.embedding_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        let rates = [
            ("train.lr_backbone", self.train.lr_backbone),
            ("train.lr_head", self.train.lr_head),
        ];
        for (name, v) in rates {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(dk) = m.attention_dk {
            if !(dk.is_finite() && dk > 0.0) {
                return Err(Error::Config("model.attention_dk must be positive".into()));
            }
        }
        if self.backends.knowledge == KnowledgeKind::Fixture && self.paths.concept_fixture.is_none() {
            return Err(Error::Config(
                "the fixture knowledge backend needs paths.concept_fixture".into(),
            ));
        }
        if self.backends.visual == VisualKind::Http && self.backends.visual_endpoint.is_none() {
            return Err(Error::Config("the http visual backend needs backends.visual_endpoint".into()));
        }
        Ok(())
    }

    pub fn attention_scale(&self) -> AttentionScale {
        self.model.attention_dk.map_or(AttentionScale::SqrtWidth, AttentionScale::Raw)
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            max_len: m.max_len,
            patches: m.patches,
            max_target_len: m.max_target_len,
            backbone: TinyConfig {
                vocab_size,
                width: m.width,
                layers: m.backbone_layers,
                ffn_width: m.ffn_width,
                max_positions: m.max_len.max(m.max_target_len + 1),
            },
            gcn: GcnConfig {
                layers: m.gcn_layers,
                width: m.width,
                activation: m.activation,
            },
            attention_scale: self.attention_scale(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            shuffle: t.shuffle,
            seed: self.seed,
            optimizer: AdamWConfig {
                lr_backbone: t.lr_backbone,
                lr_head: t.lr_head,
                weight_decay: t.weight_decay,
                clip_norm: t.clip_norm,
                ..AdamWConfig::default()
            },
        }
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            beam: self.decode.beam,
            max_len: self.decode.max_len,
            length_penalty: self.decode.length_penalty,
        }
    }
}
