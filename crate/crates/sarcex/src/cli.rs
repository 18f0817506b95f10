//! The `sarcex` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 backend error.
//! Diagnostics go to stderr; stdout carries the command's output.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sarcex_core::corpus::{compute_stats, Sample, SplitStats};
use sarcex_core::generator::Variant;
use sarcex_core::metrics::EvalReport;
use sarcex_core::text::TOKENIZER_VERSION;

use crate::artifacts::{
    load_checkpoint, read_jsonl, save_checkpoint, write_json, write_jsonl, write_loss_csv, write_reports,
    EnrichManifest, Generation,
};
use crate::config::RunConfig;
use crate::dataset::{check_split, load_split, SPLITS};
use crate::error::{Error, Result};
use crate::pipeline::{
    checkpoint_path, enrich_split, ensure_compatible, evaluate_generations, generate_records, generations_path,
    graph_path, graph_records, load_enriched, loss_path, manifest_path, reports_dir, train_variant,
    visual_backend, KnowledgeStack,
};
use crate::transport::transport_calls;

#[derive(Debug, Parser)]
#[command(name = "sarcex", version, about = "Knowledge-augmented multimodal sarcasm explanation")]
pub struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker cap; every stage currently runs on one thread.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub jobs: u32,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
}

#[derive(Debug, Args)]
pub struct VariantArg {
    /// full, plus_ts_concepts, minus_sf_ts, minus_kg_ts, minus_ts, minus_kg or minus_sf.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    Variant::from_key(s).ok_or_else(|| {
        let keys: Vec<&str> = Variant::ALL.iter().map(|v| v.key()).collect();
        format!("unknown variant {s:?}; expected one of {}", keys.join(", "))
    })
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-split sample counts, average lengths and vocabulary sizes.
    Stats {
        /// Directory holding train.jsonl, val.jsonl and test.jsonl.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Builds enriched records for every split.
    Enrich {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        split: Vec<String>,
    },
    /// Writes the token graph of every enriched record as edge lists.
    BuildGraph {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        variant: VariantArg,
        #[arg(long)]
        split: Vec<String>,
    },
    /// Trains one variant on the train split.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        variant: VariantArg,
    },
    /// Decodes explanations for a split with a trained checkpoint.
    Generate {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        variant: VariantArg,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scores generations against their references.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        variant: VariantArg,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        generations: Option<PathBuf>,
    },
    /// Trains, decodes and scores all seven variants into one table.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Inspects or clears the knowledge and visual caches.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum CacheAction {
    Inspect {
        #[command(flatten)]
        config: ConfigArg,
    },
    Clear {
        #[command(flatten)]
        config: ConfigArg,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = out.write_all(text.as_bytes());
            } else {
                let _ = err.write_all(text.as_bytes());
            }
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&arg.config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn splits_or_all(requested: &[String]) -> Result<Vec<String>> {
    if requested.is_empty() {
        return Ok(SPLITS.iter().map(|s| s.to_string()).collect());
    }
    for s in requested {
        check_split(s)?;
    }
    Ok(requested.to_vec())
}

fn w(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Stats { dataset } => stats(dataset, out, err),
        Command::Enrich { config, split } => enrich(&load_config(config, cli.seed)?, split, out, err),
        Command::BuildGraph { config, variant, split } => {
            let cfg = load_config(config, cli.seed)?;
            let variant = variant.variant.unwrap_or(cfg.variant);
            for split in splits_or_all(split)? {
                let records = load_enriched(&cfg.paths.work, &split)?;
                let graphs = graph_records(&records, variant, cfg.model.max_len)?;
                let path = graph_path(&cfg.paths.work, &split, variant);
                write_jsonl(&path, &graphs)?;
                let edges: usize = graphs.iter().map(|g| g.edges.len()).sum();
                w(out, &format!("{split}: {} graphs, {edges} edges -> {}\n", graphs.len(), path.display()))?;
            }
            Ok(())
        }
        Command::Train { config, variant } => {
            let cfg = load_config(config, cli.seed)?;
            let variant = variant.variant.unwrap_or(cfg.variant);
            train_one(&cfg, variant, out, err).map(|_| ())
        }
        Command::Generate {
            config,
            variant,
            split,
            checkpoint,
            beam,
            out: out_path,
        } => {
            let mut cfg = load_config(config, cli.seed)?;
            if let Some(b) = beam {
                if *b == 0 {
                    return Err(Error::Usage("--beam must be positive".into()));
                }
                cfg.decode.beam = *b;
            }
            let variant = variant.variant.unwrap_or(cfg.variant);
            check_split(split)?;
            let path = out_path
                .clone()
                .unwrap_or_else(|| generations_path(&cfg.paths.work, split, variant));
            let gens = generate_one(&cfg, variant, split, checkpoint.as_deref())?;
            write_jsonl(&path, &gens)?;
            w(out, &format!("{} generations -> {}\n", gens.len(), path.display()))
        }
        Command::Evaluate {
            config,
            variant,
            split,
            generations,
        } => {
            let cfg = load_config(config, cli.seed)?;
            let variant = variant.variant.unwrap_or(cfg.variant);
            let path = generations
                .clone()
                .unwrap_or_else(|| generations_path(&cfg.paths.work, split, variant));
            let gens: Vec<Generation> = read_jsonl(&path)?;
            let report = evaluate_generations(&cfg, &gens)?;
            let stem = format!("{split}.{}", variant.key());
            let text = write_reports(&reports_dir(&cfg.paths.work), &stem, &[(variant.label().to_string(), report)])?;
            w(out, &text)
        }
        Command::Ablate { config, split } => {
            let cfg = load_config(config, cli.seed)?;
            check_split(split)?;
            let mut reports: Vec<(String, EvalReport)> = Vec::new();
            for variant in Variant::ALL {
                let _ = writeln!(err, "== {}", variant.label());
                train_one(&cfg, variant, &mut std::io::sink(), err)?;
                let gens = generate_one(&cfg, variant, split, None)?;
                write_jsonl(&generations_path(&cfg.paths.work, split, variant), &gens)?;
                reports.push((variant.label().to_string(), evaluate_generations(&cfg, &gens)?));
            }
            let text = write_reports(&reports_dir(&cfg.paths.work), &format!("{split}.ablation"), &reports)?;
            w(out, &text)
        }
        Command::Cache { action } => match action {
            CacheAction::Inspect { config } => {
                let cfg = load_config(config, cli.seed)?;
                let cache = crate::knowledge::KnowledgeCache::open(cfg.paths.knowledge_cache())?;
                let visual_entries = std::fs::read_dir(cfg.paths.visual_cache())
                    .map(|d| d.count())
                    .unwrap_or(0);
                w(
                    out,
                    &format!(
                        "knowledge cache: {}\n  tokens: {}\n  absent: {}\nvisual cache: {}\n  entries: {}\n",
                        cache.path().display(),
                        cache.len(),
                        cache.absent_count(),
                        cfg.paths.visual_cache().display(),
                        visual_entries
                    ),
                )
            }
            CacheAction::Clear { config } => {
                let cfg = load_config(config, cli.seed)?;
                let k = cfg.paths.knowledge_cache();
                if k.exists() {
                    std::fs::remove_file(&k).map_err(|e| Error::io(&k, e))?;
                }
                let v = cfg.paths.visual_cache();
                if v.exists() {
                    std::fs::remove_dir_all(&v).map_err(|e| Error::io(&v, e))?;
                }
                w(out, "cache cleared\n")
            }
        },
    }
}

fn stats_row(name: &str, s: &SplitStats) -> String {
    format!(
        "{name:<10} {:>9} {:>9.2} {:>7} {:>9.2} {:>7} {:>9.2} {:>7}\n",
        s.sample_count,
        s.avg_caption_len,
        s.caption_vocab,
        s.avg_explanation_len,
        s.explanation_vocab,
        s.avg_target_len,
        s.target_vocab
    )
}

fn stats(dataset: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut all: Vec<Sample> = Vec::new();
    let mut text = format!(
        "{:<10} {:>9} {:>9} {:>7} {:>9} {:>7} {:>9} {:>7}\n",
        "split", "samples", "cap.len", "cap.|v|", "exp.len", "exp.|v|", "tgt.len", "tgt.|v|"
    );
    for split in SPLITS {
        let loaded = load_split(dataset, split)?;
        if !loaded.missing_images.is_empty() {
            let _ = writeln!(err, "warning: {split}: {} samples reference missing images", loaded.missing_images.len());
        }
        text.push_str(&stats_row(split, &compute_stats(&loaded.samples)));
        all.extend(loaded.samples);
    }
    text.push_str(&stats_row("total", &compute_stats(&all)));
    w(out, &text)
}

fn enrich(cfg: &RunConfig, splits: &[String], out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let splits = splits_or_all(splits)?;
    let visual = visual_backend(cfg)?;
    let knowledge = KnowledgeStack::from_config(cfg)?;
    let calls_before = transport_calls();
    let mut manifest = EnrichManifest {
        tokenizer: TOKENIZER_VERSION.to_string(),
        visual_backend: visual.version(),
        knowledge_source: knowledge.version(),
        samples: Default::default(),
        missing_concepts: Default::default(),
        backend_failures: Vec::new(),
        remote_fetches: 0,
        transport_calls: 0,
        config: cfg.to_toml(),
    };
    let mut report = String::new();
    for split in &splits {
        let result = enrich_split(cfg, split, visual.as_ref(), &knowledge);
        knowledge.flush()?;
        let enriched = result?;
        let path = crate::pipeline::enriched_path(&cfg.paths.work, split);
        write_jsonl(&path, &enriched.records)?;
        let missing: usize = enriched.records.iter().map(|r| r.missing.count()).sum();
        manifest.samples.insert(split.clone(), enriched.records.len());
        manifest.missing_concepts.insert(split.clone(), missing);
        for f in &enriched.backend_failures {
            let _ = writeln!(err, "warning: {f}");
        }
        manifest.backend_failures.extend(enriched.backend_failures);
        report.push_str(&format!(
            "{split}: {} records, {missing} tokens without concepts -> {}\n",
            enriched.records.len(),
            path.display()
        ));
        for r in &enriched.records {
            if !r.missing.is_empty() {
                let names: Vec<&str> = r.missing.missing.iter().map(|(_, t)| t.as_str()).collect();
                report.push_str(&format!("  {} missing {}: {}\n", r.id, names.len(), names.join(" ")));
            }
        }
    }
    manifest.remote_fetches = knowledge.remote_fetches();
    manifest.transport_calls = transport_calls() - calls_before;
    report.push_str(&format!(
        "remote fetches: {}, transport calls: {}\n",
        manifest.remote_fetches, manifest.transport_calls
    ));
    write_json(&manifest_path(&cfg.paths.work), &manifest)?;
    w(out, &report)
}

fn train_one(cfg: &RunConfig, variant: Variant, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let records = load_enriched(&cfg.paths.work, "train")?;
    let visual = visual_backend(cfg)?;
    let (file, losses) = train_variant(cfg, variant, &records, visual.as_ref(), |r| {
        if r.step % 50 == 0 {
            let _ = writeln!(err, "step {} epoch {} loss {:.4}", r.step, r.epoch, r.loss);
        }
    })?;
    let ck = checkpoint_path(&cfg.paths.work, variant);
    save_checkpoint(&ck, &file)?;
    let lp = loss_path(&cfg.paths.work, variant);
    write_loss_csv(&lp, &losses)?;
    let last = losses.last().map_or(f64::NAN, |r| r.loss);
    w(
        out,
        &format!(
            "{}: {} steps, final loss {last:.4}\ncheckpoint -> {}\nloss curve -> {}\n",
            variant.label(),
            losses.len(),
            ck.display(),
            lp.display()
        ),
    )
}

fn generate_one(cfg: &RunConfig, variant: Variant, split: &str, checkpoint: Option<&Path>) -> Result<Vec<Generation>> {
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_path(&cfg.paths.work, variant));
    let file = load_checkpoint(&path)?;
    ensure_compatible(cfg, &file, variant)?;
    let records = load_enriched(&cfg.paths.work, split)?;
    let visual = visual_backend(cfg)?;
    generate_records(&file, &records, visual.as_ref(), &cfg.decode_config())
}
