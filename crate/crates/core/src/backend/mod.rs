//! Chat/VQA model access: request types, a content-addressed response cache,
//! an HTTP client for local model servers and a deterministic in-process mock.

mod cache;
mod http;
mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use cache::{CachedEntry, ResponseCache};
pub use http::HttpBackend;
pub use mock::{mock_send, MockBackend, MockFailure, MockReply, MockRule, MockScript, RuleMatch, ClassRates};

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_SEED: u64 = 17;
pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no response after {attempts} attempt(s): {detail}")]
    Timeout { attempts: u32, detail: String },
    #[error("upstream returned HTTP {status}: {body}")]
    UpstreamError { status: u16, body: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock script has no rule for this request")]
    NoRuleMatched,
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Timeout { .. } => true,
            BackendError::UpstreamError { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    /// Base64-encoded image payloads.
    #[serde(default)]
    pub images: Vec<String>,
}

impl Message {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images: Vec::new(),
        }
    }

    pub fn user_with_image(text: impl Into<String>, image_b64: String) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images: vec![image_b64],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChatParams {
    pub temperature: f64,
    pub seed: u64,
    pub max_tokens: u32,
}

impl Default for ChatParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            seed: DEFAULT_SEED,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub params: ChatParams,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>, params: ChatParams) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            params,
        }
    }

    /// Concatenated text of every message.
    pub fn full_text(&self) -> String {
        self.messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n")
    }

    pub fn images(&self) -> impl Iterator<Item = &String> {
        self.messages.iter().flat_map(|m| m.images.iter())
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bearing = self.messages.iter().filter(|m| !m.images.is_empty()).count();
        if bearing > 1 {
            return Err(BackendError::InvalidRequest(format!(
                "{bearing} image-bearing messages; at most one allowed"
            )));
        }
        if !(self.params.temperature >= 0.0 && self.params.temperature.is_finite()) {
            return Err(BackendError::InvalidRequest("temperature must be finite and >= 0".into()));
        }
        if self.params.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        for b64 in self.images() {
            let bytes = decode_image_payload(b64)?;
            image::ImageReader::new(std::io::Cursor::new(bytes))
                .with_guessed_format()
                .map_err(|e| BackendError::InvalidRequest(e.to_string()))?
                .into_dimensions()
                .map_err(|e| BackendError::InvalidRequest(format!("image payload: {e}")))?;
        }
        Ok(())
    }

    /// Content key over model, message roles and texts, image digests and
    /// decoding parameters. Encoding is length-prefixed so it does not depend
    /// on any serializer's field order.
    pub fn cache_key(&self) -> CacheKey {
        let mut h = Sha256::new();
        let mut field = |tag: &[u8], bytes: &[u8]| {
            h.update(tag);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(b"v1", b"gully-chat");
        field(b"model", self.model_id.as_bytes());
        field(b"n_messages", &(self.messages.len() as u64).to_le_bytes());
        for m in &self.messages {
            field(b"role", m.role.as_str().as_bytes());
            field(b"text", m.text.as_bytes());
            field(b"n_images", &(m.images.len() as u64).to_le_bytes());
            for img in &m.images {
                field(b"image", image_digest(img).as_bytes());
            }
        }
        // -0.0 and 0.0 are the same request.
        let temperature = if self.params.temperature == 0.0 { 0.0f64 } else { self.params.temperature };
        field(b"temperature", &temperature.to_bits().to_le_bytes());
        field(b"seed", &self.params.seed.to_le_bytes());
        field(b"max_tokens", &self.params.max_tokens.to_le_bytes());
        CacheKey(hex::encode(h.finalize()))
    }
}

fn decode_image_payload(b64: &str) -> Result<Vec<u8>, BackendError> {
    base64::engine::general_purpose::STANDARD
        .decode(b64)
        .map_err(|e| BackendError::InvalidRequest(format!("image payload is not base64: {e}")))
}

/// Hex SHA-256 of a base64 image payload's decoded bytes (of the raw string
/// when it is not valid base64).
pub fn image_digest(b64: &str) -> String {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(b64)
        .unwrap_or_else(|_| b64.as_bytes().to_vec());
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(pub String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub model_id: String,
    pub latency_ms: u64,
    pub from_cache: bool,
}

/// An upstream that turns a request into raw response text.
pub trait Backend: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, BackendError>;

    /// Short human-readable endpoint description.
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub timeout_s: f64,
    /// Total upstream attempts per request, at least one.
    pub retries: u32,
    pub max_in_flight: usize,
    /// First backoff delay; doubles after each failed attempt.
    pub backoff_ms: u64,
}

impl Default for Policy {
    fn default() -> Self {
        Self {
            timeout_s: 120.0,
            retries: 3,
            max_in_flight: 4,
            backoff_ms: 500,
        }
    }
}

/// Counting semaphore bounding simultaneous upstream calls.
struct Gate {
    limit: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut used = self.used.lock().expect("gate lock");
        while *used >= self.limit {
            used = self.freed.wait(used).expect("gate lock");
        }
        *used += 1;
        GatePermit(self)
    }
}

struct GatePermit<'a>(&'a Gate);

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().expect("gate lock");
        *used -= 1;
        self.0.freed.notify_one();
    }
}

/// Shareable client: cache lookup, bounded parallelism, retries with backoff.
pub struct Client {
    backend: Arc<dyn Backend>,
    cache: Option<ResponseCache>,
    policy: Policy,
    gate: Gate,
    upstream_calls: AtomicU64,
}

impl Client {
    pub fn new(backend: Arc<dyn Backend>, cache: Option<ResponseCache>, policy: Policy) -> Self {
        Self {
            backend,
            cache,
            gate: Gate::new(policy.max_in_flight),
            policy,
            upstream_calls: AtomicU64::new(0),
        }
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn describe(&self) -> String {
        self.backend.describe()
    }

    /// Upstream attempts made by this client so far (cache hits excluded).
    pub fn upstream_calls(&self) -> u64 {
        self.upstream_calls.load(Ordering::SeqCst)
    }

    pub fn send(&self, req: &ChatRequest) -> Result<ChatResponse, BackendError> {
        req.validate()?;
        let key = req.cache_key();
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key)? {
                return Ok(ChatResponse {
                    text: hit.text,
                    model_id: req.model_id.clone(),
                    latency_ms: 0,
                    from_cache: true,
                });
            }
        }

        let attempts = self.policy.retries.max(1);
        let started = Instant::now();
        let mut delay = Duration::from_millis(self.policy.backoff_ms);
        let mut attempt = 0;
        let text = loop {
            attempt += 1;
            let outcome = {
                let _permit = self.gate.acquire();
                self.upstream_calls.fetch_add(1, Ordering::SeqCst);
                self.backend.complete(req)
            };
            match outcome {
                Ok(text) => break text,
                Err(e) if e.retryable() && attempt < attempts => {
                    log::debug!("attempt {attempt}/{attempts} to {} failed: {e}", self.backend.describe());
                    std::thread::sleep(delay);
                    delay *= 2;
                }
                Err(BackendError::Timeout { detail, .. }) => {
                    return Err(BackendError::Timeout { attempts: attempt, detail })
                }
                Err(e) => return Err(e),
            }
        };

        if let Some(cache) = &self.cache {
            cache.put(&key, &CachedEntry::new(&key, req, &text))?;
        }
        Ok(ChatResponse {
            text,
            model_id: req.model_id.clone(),
            latency_ms: started.elapsed().as_millis() as u64,
            from_cache: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    fn tiny_png_b64(v: u8) -> String {
        let img = image::RgbImage::from_pixel(2, 2, image::Rgb([v, v, v]));
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
    }

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("m", vec![Message::user(text)], ChatParams::default())
    }

    struct Flaky {
        failures_left: AtomicUsize,
        error: fn() -> BackendError,
    }

    impl Backend for Flaky {
        fn complete(&self, _req: &ChatRequest) -> Result<String, BackendError> {
            if self
                .failures_left
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                .is_ok()
            {
                Err((self.error)())
            } else {
                Ok("yes".into())
            }
        }

        fn describe(&self) -> String {
            "flaky".into()
        }
    }

    fn quick_policy(retries: u32) -> Policy {
        Policy {
            retries,
            backoff_ms: 1,
            ..Policy::default()
        }
    }

    #[test]
    fn retries_recover_from_transient_errors() {
        let backend = Arc::new(Flaky {
            failures_left: AtomicUsize::new(2),
            error: || BackendError::UpstreamError { status: 503, body: String::new() },
        });
        let client = Client::new(backend, None, quick_policy(3));
        assert_eq!(client.send(&req("q")).unwrap().text, "yes");
        assert_eq!(client.upstream_calls(), 3);
    }

    #[test]
    fn timeout_surfaces_after_all_attempts() {
        let backend = Arc::new(Flaky {
            failures_left: AtomicUsize::new(usize::MAX),
            error: || BackendError::Timeout { attempts: 1, detail: "down".into() },
        });
        let client = Client::new(backend, None, quick_policy(3));
        match client.send(&req("q")) {
            Err(BackendError::Timeout { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("{other:?}"),
        }
        assert_eq!(client.upstream_calls(), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let backend = Arc::new(Flaky {
            failures_left: AtomicUsize::new(usize::MAX),
            error: || BackendError::UpstreamError { status: 400, body: "bad".into() },
        });
        let client = Client::new(backend, None, quick_policy(3));
        assert!(matches!(client.send(&req("q")), Err(BackendError::UpstreamError { status: 400, .. })));
        assert_eq!(client.upstream_calls(), 1);
    }

    #[test]
    fn request_validation() {
        let img = tiny_png_b64(9);
        let mut r = req("x");
        r.messages = vec![
            Message::user_with_image("a", img.clone()),
            Message::user_with_image("b", img.clone()),
        ];
        assert!(matches!(r.validate(), Err(BackendError::InvalidRequest(_))));
        let bad = ChatRequest::new("m", vec![Message::user_with_image("a", "!!!".into())], ChatParams::default());
        assert!(bad.validate().is_err());
        let not_image = base64::engine::general_purpose::STANDARD.encode(b"hello");
        let bad = ChatRequest::new("m", vec![Message::user_with_image("a", not_image)], ChatParams::default());
        assert!(bad.validate().is_err());
        let ok = ChatRequest::new("m", vec![Message::user_with_image("a", img)], ChatParams::default());
        ok.validate().unwrap();
    }

    #[test]
    fn cache_key_covers_content_not_encoding() {
        let a = ChatRequest::new("m", vec![Message::user_with_image("q", tiny_png_b64(1))], ChatParams::default());
        let b = ChatRequest::new("m", vec![Message::user_with_image("q", tiny_png_b64(2))], ChatParams::default());
        assert_ne!(a.cache_key(), b.cache_key());
        let mut c = a.clone();
        c.params.seed = 18;
        assert_ne!(a.cache_key(), c.cache_key());
        let mut d = a.clone();
        d.model_id = "other".into();
        assert_ne!(a.cache_key(), d.cache_key());

        // Field order in the serialized request has no effect.
        let json_a = serde_json::to_string(&a).unwrap();
        let reordered = format!(
            r#"{{"params":{{"max_tokens":512,"seed":17,"temperature":0.0}},"messages":[{{"images":["{}"],"text":"q","role":"user"}}],"model_id":"m"}}"#,
            tiny_png_b64(1)
        );
        let from_a: ChatRequest = serde_json::from_str(&json_a).unwrap();
        let from_b: ChatRequest = serde_json::from_str(&reordered).unwrap();
        assert_eq!(from_a.cache_key(), from_b.cache_key());
        assert_eq!(from_a.cache_key(), a.cache_key());
    }

    #[test]
    fn message_boundaries_are_part_of_the_key() {
        let a = ChatRequest::new("m", vec![Message::user("ab"), Message::user("c")], ChatParams::default());
        let b = ChatRequest::new("m", vec![Message::user("a"), Message::user("bc")], ChatParams::default());
        assert_ne!(a.cache_key(), b.cache_key());
    }
}
