//! Artifact files: JSON Lines records, checkpoints, loss curves and reports.

use std::collections::BTreeMap;
use std::path::Path;

use sarcex_core::generator::{Checkpoint, LossRecord};
use sarcex_core::graph::Edge;
use sarcex_core::metrics::{report_table, EvalReport, MetricScores, METRIC_COLUMNS};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};

fn json_err(path: &Path, e: serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| json_err(path, e))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| json_err(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_err(path, e))
}

/// Written next to enriched records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichManifest {
    pub tokenizer: String,
    pub visual_backend: String,
    pub knowledge_source: String,
    pub samples: BTreeMap<String, usize>,
    pub missing_concepts: BTreeMap<String, usize>,
    pub backend_failures: Vec<String>,
    pub remote_fetches: usize,
    pub transport_calls: usize,
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub id: String,
    pub node_count: usize,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub id: String,
    pub candidate: String,
    pub reference: String,
}

/// Checkpoint container: the trained model plus the run configuration echo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointFile {
    pub checkpoint: Checkpoint,
    pub config: String,
}

pub fn save_checkpoint(path: &Path, file: &CheckpointFile) -> Result<()> {
    let bytes = serde_json::to_vec(file).map_err(|e| json_err(path, e))?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointFile> {
    let file: CheckpointFile = read_json(path)?;
    file.checkpoint
        .validate()
        .map_err(|e| Error::Incompatible(format!("{}: {e}", path.display())))?;
    Ok(file)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "epoch", "loss", "tokens"]).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record([
            r.step.to_string(),
            r.epoch.to_string(),
            format!("{:e}", r.loss),
            r.tokens.to_string(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: rec.position().map_or(0, |p| p.line() as usize),
            message: m.to_string(),
        };
        let step = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad step"))?;
        let loss = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad loss"))?;
        out.push((step, loss));
    }
    Ok(out)
}

pub fn report_csv(rows: &[(String, MetricScores)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model"];
    header.extend(METRIC_COLUMNS);
    w.write_record(&header).map_err(|e| Error::Config(e.to_string()))?;
    for (name, s) in rows {
        let mut rec = vec![name.clone()];
        rec.extend(s.to_array().iter().map(|v| format!("{v:.4}")));
        w.write_record(&rec).map_err(|e| Error::Config(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
}

/// Writes `<stem>.csv`, `<stem>.txt` and, per report, `<stem>.<row>.samples.jsonl`.
pub fn write_reports(dir: &Path, stem: &str, reports: &[(String, EvalReport)]) -> Result<String> {
    let rows: Vec<(String, MetricScores)> = reports.iter().map(|(n, r)| (n.clone(), r.scores)).collect();
    let table = report_table(&rows)?;
    write_atomic(&dir.join(format!("{stem}.csv")), report_csv(&rows)?.as_bytes())?;
    let tokenizer = reports.first().map(|(_, r)| r.tokenizer.as_str()).unwrap_or_default();
    let embedder = reports.first().map(|(_, r)| r.embedder.as_str()).unwrap_or_default();
    let text = format!("{table}\ntokenizer: {tokenizer}; embedder: {embedder}\n");
    write_atomic(&dir.join(format!("{stem}.txt")), text.as_bytes())?;
    for (i, (_, r)) in reports.iter().enumerate() {
        let name = if reports.len() == 1 {
            format!("{stem}.samples.jsonl")
        } else {
            format!("{stem}.{i}.samples.jsonl")
        };
        write_jsonl(&dir.join(name), &r.per_sample)?;
    }
    Ok(text)
}
