//! HTTP visual backend and an on-disk cache for any visual backend.
//!
//! The HTTP service answers three POST routes, each with body
//! `{"image": <ref>, "data": <base64 bytes or null>}`:
//!
//! | route       | response                                        |
//! |-------------|-------------------------------------------------|
//! | `/describe` | `{"description": "..."}`                        |
//! | `/detect`   | `{"objects": [{"label": .., "confidence": ..}]}` |
//! | `/embed`    | `{"features": [[f64; D_f]; m]}`                  |
//!
//! `GET /version` returns the backend version string.

use std::path::{Path, PathBuf};

use base64::Engine;
use sarcex_core::text::{lowercase, word_tokens};
use sarcex_core::visual::{ImageDescription, ObjectLabel, VisualBackend, VisualFeatureMatrix};
use sarcex_core::{CoreError, Matrix};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{resolve_image, write_atomic};
use crate::transport::Transport;

pub struct HttpVisualBackend<T> {
    endpoint: String,
    transport: T,
    base_dir: PathBuf,
    version: String,
}

fn backend_err(msg: impl Into<String>) -> CoreError {
    CoreError::Backend(msg.into())
}

impl<T: Transport> HttpVisualBackend<T> {
    /// Queries the service version once; local image paths resolve against `base_dir`.
    pub fn connect(endpoint: &str, transport: T, base_dir: &Path) -> sarcex_core::Result<Self> {
        let endpoint = endpoint.trim_end_matches('/').to_string();
        let resp = transport
            .get(&format!("{endpoint}/version"))
            .map_err(backend_err)?;
        if !resp.is_success() {
            return Err(backend_err(format!("{endpoint}/version: HTTP {}", resp.status)));
        }
        Ok(Self {
            version: format!("http:{}", resp.body.trim()),
            endpoint,
            transport,
            base_dir: base_dir.to_path_buf(),
        })
    }

    fn call<R: DeserializeOwned>(&self, route: &str, image_ref: &str) -> sarcex_core::Result<R> {
        let path = resolve_image(&self.base_dir, image_ref);
        let data = std::fs::read(&path)
            .ok()
            .map(|b| base64::engine::general_purpose::STANDARD.encode(b));
        let body = serde_json::json!({ "image": image_ref, "data": data });
        let url = format!("{}/{route}", self.endpoint);
        let resp = self.transport.post_json(&url, &body).map_err(backend_err)?;
        if !resp.is_success() {
            return Err(backend_err(format!("{url}: HTTP {}", resp.status)));
        }
        serde_json::from_str(&resp.body).map_err(|e| backend_err(format!("{url}: {e}")))
    }
}

impl<T: Transport> VisualBackend for HttpVisualBackend<T> {
    fn version(&self) -> String {
        self.version.clone()
    }

    fn describe(&self, image_ref: &str) -> sarcex_core::Result<ImageDescription> {
        #[derive(Deserialize)]
        struct R {
            description: String,
        }
        let r: R = self.call("describe", image_ref)?;
        Ok(ImageDescription {
            tokens: word_tokens(&lowercase(&r.description)),
        })
    }

    fn detect(&self, image_ref: &str) -> sarcex_core::Result<Vec<ObjectLabel>> {
        #[derive(Deserialize)]
        struct R {
            objects: Vec<ObjectLabel>,
        }
        let r: R = self.call("detect", image_ref)?;
        Ok(r.objects)
    }

    fn embed(&self, image_ref: &str) -> sarcex_core::Result<VisualFeatureMatrix> {
        #[derive(Deserialize)]
        struct R {
            features: Vec<Vec<f64>>,
        }
        let r: R = self.call("embed", image_ref)?;
        let rows: Vec<&[f64]> = r.features.iter().map(Vec::as_slice).collect();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.is_empty() || rows.iter().any(|r| r.len() != width) {
            return Err(backend_err("ragged or empty feature matrix"));
        }
        Ok(VisualFeatureMatrix {
            values: Matrix::from_rows(&rows),
        })
    }
}

/// Caches backend results under `dir`, keyed by (image content hash,
/// backend version). Images that cannot be read are keyed by their reference.
pub struct CachedVisualBackend<B> {
    inner: B,
    dir: PathBuf,
    base_dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CachedFeatures {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl<B: VisualBackend> CachedVisualBackend<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            dir: dir.into(),
            base_dir: base_dir.into(),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn image_hash(&self, image_ref: &str) -> String {
        let mut h = Sha256::new();
        match std::fs::read(resolve_image(&self.base_dir, image_ref)) {
            Ok(bytes) => h.update(&bytes),
            Err(_) => {
                h.update(b"ref:");
                h.update(image_ref.as_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    fn entry_path(&self, image_ref: &str, kind: &str) -> PathBuf {
        let mut h = Sha256::new();
        h.update(self.image_hash(image_ref).as_bytes());
        h.update([0]);
        h.update(self.inner.version().as_bytes());
        h.update([0]);
        h.update(kind.as_bytes());
        self.dir.join(format!("{:x}.{kind}.json", h.finalize()))
    }

    fn cached<V: Serialize + DeserializeOwned>(
        &self,
        image_ref: &str,
        kind: &str,
        compute: impl FnOnce() -> sarcex_core::Result<V>,
    ) -> sarcex_core::Result<V> {
        let path = self.entry_path(image_ref, kind);
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(v) = serde_json::from_str(&text) {
                return Ok(v);
            }
        }
        let v = compute()?;
        let bytes = serde_json::to_vec(&v).map_err(|e| backend_err(e.to_string()))?;
        write_atomic(&path, &bytes).map_err(|e| backend_err(e.to_string()))?;
        Ok(v)
    }
}

impl<B: VisualBackend> VisualBackend for CachedVisualBackend<B> {
    fn version(&self) -> String {
        self.inner.version()
    }

    fn describe(&self, image_ref: &str) -> sarcex_core::Result<ImageDescription> {
        self.cached(image_ref, "describe", || self.inner.describe(image_ref))
    }

    fn detect(&self, image_ref: &str) -> sarcex_core::Result<Vec<ObjectLabel>> {
        self.cached(image_ref, "detect", || self.inner.detect(image_ref))
    }

    fn embed(&self, image_ref: &str) -> sarcex_core::Result<VisualFeatureMatrix> {
        let f: CachedFeatures = self.cached(image_ref, "embed", || {
            let m = self.inner.embed(image_ref)?.values;
            Ok(CachedFeatures {
                rows: m.rows(),
                cols: m.cols(),
                values: m.into_vec(),
            })
        })?;
        Ok(VisualFeatureMatrix {
            values: Matrix::from_vec(f.rows, f.cols, f.values)?,
        })
    }
}
