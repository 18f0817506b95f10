//! ConceptNet client, persistent concept cache and fixture loading.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use sarcex_core::knowledge::{ConceptEntry, ConceptSource, FixtureSource};
use sarcex_core::text::lowercase;
use sarcex_core::CoreError;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::transport::Transport;

pub const ENDPOINT_ENV: &str = "SARCEX_CONCEPTNET_URL";
pub const DEFAULT_ENDPOINT: &str = "https://api.conceptnet.io";

/// Cache and fixture key for a token.
pub fn cache_key(token: &str) -> String {
    lowercase(&token.nfc().collect::<String>())
}

pub fn load_fixture(path: &Path) -> Result<FixtureSource> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: FixtureSource = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut out = FixtureSource::default();
    for (token, edges) in raw.edges {
        out.edges.entry(cache_key(&token)).or_default().extend(edges);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub requests_per_second: f64,
    pub burst: f64,
    pub retries: u32,
    pub backoff_ms: u64,
    /// Edges requested per query.
    pub limit: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            requests_per_second: 1.0,
            burst: 1.0,
            retries: 3,
            backoff_ms: 500,
            limit: 1000,
        }
    }
}

#[derive(Debug)]
struct TokenBucket {
    rate: f64,
    capacity: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(rate: f64, capacity: f64) -> Self {
        let capacity = capacity.max(1.0);
        Self {
            rate,
            capacity,
            tokens: capacity,
            last: Instant::now(),
        }
    }

    /// Time to wait before the next request may go out.
    fn reserve(&mut self) -> Duration {
        if self.rate <= 0.0 || !self.rate.is_finite() {
            return Duration::ZERO;
        }
        let now = Instant::now();
        self.tokens = (self.tokens + now.duration_since(self.last).as_secs_f64() * self.rate).min(self.capacity);
        self.last = now;
        self.tokens -= 1.0;
        if self.tokens >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-self.tokens / self.rate)
        }
    }
}

/// Top-1 English one-hop neighbor of a token, queried over HTTP.
pub struct ConceptNetClient<T> {
    endpoint: String,
    transport: T,
    config: ClientConfig,
    bucket: Mutex<TokenBucket>,
}

impl<T: Transport> ConceptNetClient<T> {
    pub fn new(endpoint: impl Into<String>, transport: T, config: ClientConfig) -> Self {
        Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            transport,
            bucket: Mutex::new(TokenBucket::new(config.requests_per_second, config.burst)),
            config,
        }
    }

    /// Endpoint from [`ENDPOINT_ENV`], falling back to `fallback`.
    pub fn endpoint_from_env(fallback: Option<&str>) -> String {
        std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.trim().is_empty())
            .or_else(|| fallback.map(str::to_string))
            .unwrap_or_else(|| DEFAULT_ENDPOINT.to_string())
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn query_url(&self, token: &str) -> std::result::Result<String, String> {
        let term = cache_key(token).split_whitespace().collect::<Vec<_>>().join("_");
        let url = url::Url::parse_with_params(
            &format!("{}/query", self.endpoint),
            &[
                ("node", format!("/c/en/{term}")),
                ("other", "/c/en".to_string()),
                ("limit", self.config.limit.to_string()),
            ],
        )
        .map_err(|e| e.to_string())?;
        Ok(url.into())
    }

    fn throttle(&self) {
        let wait = self.bucket.lock().map(|mut b| b.reserve()).unwrap_or_default();
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    /// Raw edge list `(concept text, weight)` for `token`.
    pub fn fetch_edges(&self, token: &str) -> std::result::Result<Vec<(String, f64)>, String> {
        let url = self.query_url(token)?;
        let mut last_error = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempt - 1).min(16)));
            }
            self.throttle();
            match self.transport.get(&url) {
                Ok(resp) if resp.is_success() => return parse_edges(token, &resp.body),
                Ok(resp) if resp.status == 404 => return Ok(Vec::new()),
                Ok(resp) if resp.is_transient() => last_error = format!("HTTP {}", resp.status),
                Ok(resp) => return Err(format!("HTTP {}", resp.status)),
                Err(e) => last_error = e,
            }
        }
        Err(format!("{last_error} after {} attempts", self.config.retries + 1))
    }
}

impl<T: Transport> ConceptSource for ConceptNetClient<T> {
    fn lookup(&self, token: &str) -> sarcex_core::Result<Option<ConceptEntry>> {
        let edges = self.fetch_edges(token).map_err(|message| CoreError::Source {
            token: token.to_string(),
            message,
        })?;
        FixtureSource {
            edges: BTreeMap::from([(cache_key(token), edges)]),
        }
        .lookup(token)
    }
}

fn english_term(id: &str) -> Option<&str> {
    let mut parts = id.split('/');
    match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some(""), Some("c"), Some("en"), Some(term)) if !term.is_empty() => Some(term),
        _ => None,
    }
}

/// English neighbors in a ConceptNet `/query` response, in edge order.
pub fn parse_edges(token: &str, body: &str) -> std::result::Result<Vec<(String, f64)>, String> {
    #[derive(Deserialize)]
    struct Node {
        #[serde(rename = "@id")]
        id: String,
    }
    #[derive(Deserialize)]
    struct RawEdge {
        start: Node,
        end: Node,
        weight: f64,
    }
    #[derive(Deserialize)]
    struct Page {
        #[serde(default)]
        edges: Vec<RawEdge>,
    }
    let page: Page = serde_json::from_str(body).map_err(|e| format!("malformed response: {e}"))?;
    let own = cache_key(token).split_whitespace().collect::<Vec<_>>().join("_");
    let mut out = Vec::new();
    for e in page.edges {
        let (a, b) = (english_term(&e.start.id), english_term(&e.end.id));
        let other = match (a, b) {
            (Some(a), Some(b)) if a == own && b != own => b,
            (Some(a), Some(b)) if b == own && a != own => a,
            _ => continue,
        };
        out.push((other.replace('_', " "), e.weight));
    }
    Ok(out)
}

/// Persistent `token → [(concept, weight)]` map in the fixture layout; an
/// empty list records a token the service had no concept for.
pub struct KnowledgeCache {
    path: PathBuf,
    state: Mutex<CacheState>,
}

#[derive(Default)]
struct CacheState {
    entries: BTreeMap<String, Vec<(String, f64)>>,
    dirty: bool,
}

impl KnowledgeCache {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let entries = if path.exists() {
            load_fixture(&path)?.edges
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            path,
            state: Mutex::new(CacheState { entries, dirty: false }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, CacheState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn get(&self, token: &str) -> Option<Option<ConceptEntry>> {
        let state = self.lock();
        let edges = state.entries.get(&cache_key(token))?;
        Some(edges.first().and_then(|(c, w)| ConceptEntry::new(token, c, *w)))
    }

    pub fn put(&self, token: &str, entry: Option<&ConceptEntry>) {
        let value = entry
            .map(|e| vec![(e.concept_tokens.join(" "), e.relevance)])
            .unwrap_or_default();
        let mut state = self.lock();
        state.entries.insert(cache_key(token), value);
        state.dirty = true;
    }

    pub fn len(&self) -> usize {
        self.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn absent_count(&self) -> usize {
        self.lock().entries.values().filter(|v| v.is_empty()).count()
    }

    pub fn flush(&self) -> Result<()> {
        let mut state = self.lock();
        if !state.dirty {
            return Ok(());
        }
        let mut bytes = serde_json::to_vec_pretty(&state.entries).map_err(|e| Error::Config(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&self.path, &bytes)?;
        state.dirty = false;
        Ok(())
    }
}

/// Read-through cache in front of another concept source.
pub struct CachedSource<S> {
    inner: S,
    cache: KnowledgeCache,
    remote_fetches: AtomicUsize,
}

impl<S: ConceptSource> CachedSource<S> {
    pub fn new(inner: S, cache: KnowledgeCache) -> Self {
        Self {
            inner,
            cache,
            remote_fetches: AtomicUsize::new(0),
        }
    }

    /// Lookups that missed the cache.
    pub fn remote_fetches(&self) -> usize {
        self.remote_fetches.load(Ordering::SeqCst)
    }

    pub fn cache(&self) -> &KnowledgeCache {
        &self.cache
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: ConceptSource> ConceptSource for CachedSource<S> {
    fn lookup(&self, token: &str) -> sarcex_core::Result<Option<ConceptEntry>> {
        if let Some(hit) = self.cache.get(token) {
            return Ok(hit);
        }
        self.remote_fetches.fetch_add(1, Ordering::SeqCst);
        let entry = self.inner.lookup(token)?;
        self.cache.put(token, entry.as_ref());
        Ok(entry)
    }
}
