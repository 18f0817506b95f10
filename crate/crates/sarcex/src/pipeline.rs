//! End-to-end stages shared by the command line and the tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sarcex_core::backbone::Vocab;
use sarcex_core::corpus::Sample;
use sarcex_core::enrich::{build_knowledge_sequence, EnrichedRecord, SourceTokens};
use sarcex_core::generator::{
    prepare_sample, train, Checkpoint, DecodeConfig, LossRecord, Model, PreparedSample, Variant,
    CHECKPOINT_FORMAT,
};
use sarcex_core::graph::build_graph;
use sarcex_core::knowledge::{
    diagnose_missing, enrich_tokens, ConceptEntry, ConceptSource, FixtureSource, MissingReport,
};
use sarcex_core::metrics::{evaluate_corpus, metric_tokens, BleuConfig, EvalReport, HashEmbedder};
use sarcex_core::text::{lowercase, word_tokens, TOKENIZER_VERSION};
use sarcex_core::visual::{
    describe_image, detect_objects, embed_image, StubVisualBackend, VisualBackend,
};

use crate::artifacts::{CheckpointFile, Generation, GraphRecord};
use crate::config::{KnowledgeKind, RunConfig, VisualKind};
use crate::dataset::load_split;
use crate::error::{Error, Result};
use crate::knowledge::{load_fixture, CachedSource, ConceptNetClient, KnowledgeCache};
use crate::transport::{Transport, UreqTransport};
use crate::vision::{CachedVisualBackend, HttpVisualBackend};

/// Lowercase punctuation-split tokens, as used for every model input.
pub fn text_tokens(text: &str) -> Vec<String> {
    word_tokens(&lowercase(text))
}

pub enum KnowledgeStack {
    Fixture { source: FixtureSource, path: PathBuf },
    Remote(CachedSource<ConceptNetClient<Box<dyn Transport>>>),
}

impl KnowledgeStack {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match cfg.backends.knowledge {
            KnowledgeKind::Fixture => {
                let path = cfg
                    .paths
                    .concept_fixture
                    .clone()
                    .ok_or_else(|| Error::Config("paths.concept_fixture is required".into()))?;
                Ok(KnowledgeStack::Fixture {
                    source: load_fixture(&path)?,
                    path,
                })
            }
            KnowledgeKind::Conceptnet => {
                Self::remote(cfg, Box::new(UreqTransport::default()))
            }
        }
    }

    /// ConceptNet behind the persistent cache, over the given transport.
    pub fn remote(cfg: &RunConfig, transport: Box<dyn Transport>) -> Result<Self> {
        let endpoint = ConceptNetClient::<Box<dyn Transport>>::endpoint_from_env(cfg.backends.knowledge_endpoint.as_deref());
        let client = ConceptNetClient::new(endpoint, transport, cfg.knowledge);
        let cache = KnowledgeCache::open(cfg.paths.knowledge_cache())?;
        Ok(KnowledgeStack::Remote(CachedSource::new(client, cache)))
    }

    pub fn version(&self) -> String {
        match self {
            KnowledgeStack::Fixture { path, .. } => format!("fixture:{}", path.display()),
            KnowledgeStack::Remote(_) => "conceptnet-top1-en-v1".to_string(),
        }
    }

    pub fn remote_fetches(&self) -> usize {
        match self {
            KnowledgeStack::Fixture { .. } => 0,
            KnowledgeStack::Remote(c) => c.remote_fetches(),
        }
    }

    pub fn flush(&self) -> Result<()> {
        match self {
            KnowledgeStack::Fixture { .. } => Ok(()),
            KnowledgeStack::Remote(c) => c.cache().flush(),
        }
    }
}

impl ConceptSource for KnowledgeStack {
    fn lookup(&self, token: &str) -> sarcex_core::Result<Option<ConceptEntry>> {
        match self {
            KnowledgeStack::Fixture { source, .. } => source.lookup(token),
            KnowledgeStack::Remote(c) => c.lookup(token),
        }
    }
}

pub fn visual_backend(cfg: &RunConfig) -> Result<Box<dyn VisualBackend>> {
    match cfg.backends.visual {
        VisualKind::Stub => Ok(Box::new(StubVisualBackend::with_shape(
            cfg.backends.visual_seed,
            cfg.model.patches,
            cfg.model.width,
        ))),
        VisualKind::Http => {
            let endpoint = cfg
                .backends
                .visual_endpoint
                .as_deref()
                .ok_or_else(|| Error::Config("backends.visual_endpoint is required".into()))?;
            let http = HttpVisualBackend::connect(endpoint, UreqTransport::default(), &cfg.paths.dataset)?;
            Ok(Box::new(CachedVisualBackend::new(
                http,
                cfg.paths.visual_cache(),
                cfg.paths.dataset.clone(),
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichOutcome {
    pub record: EnrichedRecord,
    /// Visual extraction failures that degraded to empty output.
    pub backend_failures: Vec<String>,
}

pub fn enrich_sample(
    sample: &Sample,
    visual: &dyn VisualBackend,
    knowledge: &dyn ConceptSource,
    max_objects: usize,
    max_len: usize,
) -> Result<EnrichOutcome> {
    let mut failures = Vec::new();
    let caption = text_tokens(&sample.caption);
    let description = match describe_image(&sample.image_ref, visual) {
        Ok(d) => d.tokens.iter().flat_map(|t| text_tokens(t)).collect(),
        Err(e) => {
            failures.push(format!("{}: describe: {e}", sample.id));
            Vec::new()
        }
    };
    let objects: Vec<String> = match detect_objects(&sample.image_ref, max_objects, visual) {
        Ok(o) => o.tokens().iter().map(|t| lowercase(t)).collect(),
        Err(e) => {
            failures.push(format!("{}: detect: {e}", sample.id));
            Vec::new()
        }
    };
    let target = text_tokens(&sample.target);
    let lc = enrich_tokens(knowledge, &caption)?;
    let ld = enrich_tokens(knowledge, &description)?;
    let lo = enrich_tokens(knowledge, &objects)?;
    let lt = enrich_tokens(knowledge, &target)?;
    let mut missing = MissingReport::default();
    let mut offset = 0;
    for (lookup, tokens) in [(&lc, &caption), (&ld, &description), (&lo, &objects), (&lt, &target)] {
        let part = diagnose_missing(lookup, tokens)?;
        missing
            .missing
            .extend(part.missing.into_iter().map(|(i, t)| (i + offset, t)));
        offset += tokens.len();
    }
    let knowledge_seq = build_knowledge_sequence(
        SourceTokens::new(&caption, &lc),
        SourceTokens::new(&description, &ld),
        SourceTokens::new(&objects, &lo),
        Some(max_len),
    )?;
    Ok(EnrichOutcome {
        record: EnrichedRecord {
            id: sample.id.clone(),
            image_ref: sample.image_ref.clone(),
            knowledge: knowledge_seq,
            target_tokens: target,
            target_lookup: lt,
            explanation: sample.explanation.clone(),
            missing,
        },
        backend_failures: failures,
    })
}

pub fn enriched_path(work: &Path, split: &str) -> PathBuf {
    work.join("enriched").join(format!("{split}.jsonl"))
}

pub fn manifest_path(work: &Path) -> PathBuf {
    work.join("enriched").join("manifest.json")
}

pub fn graph_path(work: &Path, split: &str, variant: Variant) -> PathBuf {
    work.join("graphs").join(format!("{split}.{}.jsonl", variant.key()))
}

pub fn checkpoint_path(work: &Path, variant: Variant) -> PathBuf {
    work.join("checkpoints").join(format!("{}.json", variant.key()))
}

pub fn loss_path(work: &Path, variant: Variant) -> PathBuf {
    work.join("loss").join(format!("{}.csv", variant.key()))
}

pub fn generations_path(work: &Path, split: &str, variant: Variant) -> PathBuf {
    work.join("generations").join(format!("{split}.{}.jsonl", variant.key()))
}

pub fn reports_dir(work: &Path) -> PathBuf {
    work.join("reports")
}

pub struct SplitEnrichment {
    pub records: Vec<EnrichedRecord>,
    pub backend_failures: Vec<String>,
}

pub fn enrich_split(
    cfg: &RunConfig,
    split: &str,
    visual: &dyn VisualBackend,
    knowledge: &dyn ConceptSource,
) -> Result<SplitEnrichment> {
    let loaded = load_split(&cfg.paths.dataset, split)?;
    let mut records = Vec::with_capacity(loaded.samples.len());
    let mut backend_failures = Vec::new();
    for s in &loaded.samples {
        let out = enrich_sample(s, visual, knowledge, cfg.model.max_objects, cfg.model.max_len)?;
        records.push(out.record);
        backend_failures.extend(out.backend_failures);
    }
    Ok(SplitEnrichment {
        records,
        backend_failures,
    })
}

pub fn load_enriched(work: &Path, split: &str) -> Result<Vec<EnrichedRecord>> {
    let path = enriched_path(work, split);
    if !path.exists() {
        return Err(Error::Usage(format!(
            "{} not found; run `sarcex enrich` first",
            path.display()
        )));
    }
    crate::artifacts::read_jsonl(&path)
}

pub fn graph_records(records: &[EnrichedRecord], variant: Variant, max_len: usize) -> Result<Vec<GraphRecord>> {
    records
        .iter()
        .map(|r| {
            let seq = r.sequence(variant.includes_target(), variant.includes_target_concepts(), Some(max_len))?;
            let g = build_graph(&seq)?;
            Ok(GraphRecord {
                id: r.id.clone(),
                node_count: g.node_count,
                edges: g.sorted_edges(),
            })
        })
        .collect()
}

/// Vocabulary over every model input any variant can produce, plus the
/// explanation tokens.
pub fn build_vocab(records: &[EnrichedRecord], max_size: Option<usize>) -> Result<Vocab> {
    let mut tokens: Vec<String> = Vec::new();
    for r in records {
        tokens.extend(r.sequence(true, true, None)?.tokens);
        tokens.extend(metric_tokens(&r.explanation));
    }
    Ok(Vocab::build(tokens.iter().map(String::as_str), max_size))
}

pub fn prepare_records(
    records: &[EnrichedRecord],
    visual: &dyn VisualBackend,
    variant: Variant,
    model: &Model,
) -> Result<Vec<PreparedSample>> {
    records
        .iter()
        .map(|r| {
            let features = embed_image(&r.image_ref, visual)?;
            let reference = metric_tokens(&r.explanation);
            Ok(prepare_sample(r, &features, &reference, variant, &model.vocab, &model.config)?)
        })
        .collect()
}

pub fn versions(visual: &dyn VisualBackend) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("tokenizer".to_string(), TOKENIZER_VERSION.to_string()),
        ("visual".to_string(), visual.version()),
        ("sarcex".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ])
}

pub fn train_variant(
    cfg: &RunConfig,
    variant: Variant,
    train_records: &[EnrichedRecord],
    visual: &dyn VisualBackend,
    on_step: impl FnMut(&LossRecord),
) -> Result<(CheckpointFile, Vec<LossRecord>)> {
    let vocab = build_vocab(train_records, cfg.model.vocab_max)?;
    let model_cfg = cfg.model_config(vocab.len());
    let mut model = Model::init(model_cfg, vocab, cfg.seed)?;
    let samples = prepare_records(train_records, visual, variant, &model)?;
    let train_cfg = cfg.train_config();
    let losses = train(&mut model, &samples, variant, &train_cfg, on_step)?;
    let checkpoint = Checkpoint {
        format: CHECKPOINT_FORMAT,
        variant,
        seed: cfg.seed,
        train: train_cfg,
        model,
        versions: versions(visual),
    };
    Ok((
        CheckpointFile {
            checkpoint,
            config: cfg.to_toml(),
        },
        losses,
    ))
}

/// Rejects checkpoints whose model or variant disagree with the run config.
pub fn ensure_compatible(cfg: &RunConfig, file: &CheckpointFile, variant: Variant) -> Result<()> {
    let ck = &file.checkpoint;
    let expected = cfg.model_config(ck.model.vocab.len());
    if ck.model.config != expected {
        return Err(Error::Incompatible(format!(
            "checkpoint model {:?} does not match config {:?}",
            ck.model.config, expected
        )));
    }
    if ck.variant != variant {
        return Err(Error::Incompatible(format!(
            "checkpoint was trained as {}, requested {}",
            ck.variant.key(),
            variant.key()
        )));
    }
    Ok(())
}

pub fn generate_records(
    file: &CheckpointFile,
    records: &[EnrichedRecord],
    visual: &dyn VisualBackend,
    decode: &DecodeConfig,
) -> Result<Vec<Generation>> {
    let ck = &file.checkpoint;
    let samples = prepare_records(records, visual, ck.variant, &ck.model)?;
    samples
        .iter()
        .map(|s| {
            Ok(Generation {
                id: s.id.clone(),
                candidate: ck.model.generate_text(s, ck.variant, decode)?,
                reference: s.reference.clone(),
            })
        })
        .collect()
}

pub fn evaluate_generations(cfg: &RunConfig, generations: &[Generation]) -> Result<EvalReport> {
    let embedder = HashEmbedder {
        dim: cfg.backends.embedding_dim,
        seed: 0,
    };
    let cands: Vec<&str> = generations.iter().map(|g| g.candidate.as_str()).collect();
    let refs: Vec<&str> = generations.iter().map(|g| g.reference.as_str()).collect();
    Ok(evaluate_corpus(&cands, &refs, &embedder, BleuConfig::default())?)
}
