//! Minimal HTTP transport used by the knowledge and vision clients.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

static TRANSPORT_CALLS: AtomicUsize = AtomicUsize::new(0);

/// Requests issued by any [`UreqTransport`] in this process.
pub fn transport_calls() -> usize {
    TRANSPORT_CALLS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

impl HttpResponse {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// Statuses worth retrying: throttling and server errors.
    pub fn is_transient(&self) -> bool {
        self.status == 429 || self.status >= 500
    }
}

/// `Err` means the request never produced an HTTP response.
pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> Result<HttpResponse, String>;
    fn post_json(&self, url: &str, body: &serde_json::Value) -> Result<HttpResponse, String>;
}

impl<T: Transport + ?Sized> Transport for &T {
    fn get(&self, url: &str) -> Result<HttpResponse, String> {
        (**self).get(url)
    }

    fn post_json(&self, url: &str, body: &serde_json::Value) -> Result<HttpResponse, String> {
        (**self).post_json(url, body)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn get(&self, url: &str) -> Result<HttpResponse, String> {
        (**self).get(url)
    }

    fn post_json(&self, url: &str, body: &serde_json::Value) -> Result<HttpResponse, String> {
        (**self).post_json(url, body)
    }
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        Self {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
        }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(30))
    }
}

fn into_response(result: Result<ureq::Response, ureq::Error>) -> Result<HttpResponse, String> {
    let resp = match result {
        Ok(r) => r,
        Err(ureq::Error::Status(_, r)) => r,
        Err(e) => return Err(e.to_string()),
    };
    let status = resp.status();
    let body = resp.into_string().map_err(|e| e.to_string())?;
    Ok(HttpResponse { status, body })
}

impl Transport for UreqTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, String> {
        TRANSPORT_CALLS.fetch_add(1, Ordering::SeqCst);
        into_response(self.agent.get(url).call())
    }

    fn post_json(&self, url: &str, body: &serde_json::Value) -> Result<HttpResponse, String> {
        TRANSPORT_CALLS.fetch_add(1, Ordering::SeqCst);
        into_response(self.agent.post(url).send_json(body.clone()))
    }
}

/// Wraps a transport and counts the requests passing through it.
pub struct CountingTransport<T> {
    inner: T,
    calls: AtomicUsize,
}

impl<T> CountingTransport<T> {
    pub fn new(inner: T) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<T: Transport> Transport for CountingTransport<T> {
    fn get(&self, url: &str) -> Result<HttpResponse, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.get(url)
    }

    fn post_json(&self, url: &str, body: &serde_json::Value) -> Result<HttpResponse, String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.post_json(url, body)
    }
}
