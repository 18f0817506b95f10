//! JSON Lines dataset files: one `{id, image, caption, explanation, target}`
//! object per line, stored as `<dir>/<split>.jsonl`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sarcex_core::corpus::Sample;
use serde::Deserialize;
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSplit {
    pub samples: Vec<Sample>,
    /// Ids whose local image file does not exist.
    pub missing_images: Vec<String>,
}

#[derive(Deserialize)]
struct RawSample {
    id: Option<serde_json::Value>,
    image: Option<String>,
    caption: Option<String>,
    explanation: Option<String>,
    target: Option<String>,
}

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

pub fn check_split(split: &str) -> Result<()> {
    if SPLITS.contains(&split) {
        Ok(())
    } else {
        Err(Error::Usage(format!("unknown split {split:?}, expected one of {SPLITS:?}")))
    }
}

pub fn load_split(dir: &Path, split: &str) -> Result<LoadedSplit> {
    check_split(split)?;
    load_file(&split_path(dir, split))
}

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

fn is_remote(image: &str) -> bool {
    image.contains("://")
}

/// Resolves a local image reference against the dataset directory.
pub fn resolve_image(base: &Path, image: &str) -> PathBuf {
    let p = Path::new(image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load_file(path: &Path) -> Result<LoadedSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::new();
    let mut missing_images = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawSample = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let missing = |field: &str| Error::MissingField {
            path: path.to_path_buf(),
            line: line_no,
            field: field.to_string(),
        };
        let id = match raw.id {
            Some(serde_json::Value::String(s)) => s,
            Some(serde_json::Value::Number(n)) => n.to_string(),
            _ => return Err(missing("id")),
        };
        let sample = Sample {
            id: nfc(&id),
            image_ref: nfc(&raw.image.ok_or_else(|| missing("image"))?),
            caption: nfc(&raw.caption.ok_or_else(|| missing("caption"))?),
            explanation: nfc(&raw.explanation.ok_or_else(|| missing("explanation"))?),
            target: nfc(&raw.target.ok_or_else(|| missing("target"))?),
        };
        if let Some(field) = sample.invalid_field() {
            return Err(missing(field));
        }
        if sample.image_ref.trim().is_empty() {
            return Err(missing("image"));
        }
        if !is_remote(&sample.image_ref) && !resolve_image(base, &sample.image_ref).exists() {
            missing_images.push(sample.id.clone());
        }
        samples.push(sample);
    }
    Ok(LoadedSplit {
        samples,
        missing_images,
    })
}

pub fn write_file(path: &Path, samples: &[Sample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s).map_err(|e| Error::Config(e.to_string()))?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
