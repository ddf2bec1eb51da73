//! Chat-completions client with a content-addressed response cache, plus
//! token-embedding providers for BERTScore.
//!
//! Cache layout: one JSON file per completion, `<cache_dir>/<cache_key>.json`,
//! and one per embedded text under `<cache_dir>/embeddings/<key>.json`. The
//! key is the SHA-256 of the model id, the rendered prompt and the sampling
//! parameters, so a warm cache replays a run without touching the network.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::prompting::{postprocess_code, RenderedPrompt};
use crate::text_metrics::{tokenize_for_rouge, TokenEmbeddingSet};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("invalid endpoint {name:?}: {message}")]
    InvalidEndpoint { name: String, message: String },
    #[error("endpoint {endpoint:?} unreachable after {attempts} attempt(s): {message}")]
    Transport { endpoint: String, attempts: u32, message: String },
    #[error("endpoint {endpoint:?} answered HTTP {status}: {body}")]
    Status { endpoint: String, status: u16, body: String },
    #[error("endpoint {endpoint:?} sent an unexpected response: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("endpoint {endpoint:?} returned an empty completion")]
    EmptyGeneration { endpoint: String },
    #[error("cache miss for {key} while offline")]
    CacheMiss { key: String },
    #[error("cache I/O at {path}: {source}")]
    Cache { path: String, source: std::io::Error },
    #[error("embedding provider {provider:?} returned sentence-level vectors; configure a provider that returns one vector per token")]
    SentenceLevelEmbedding { provider: String },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("HTTP support is not compiled in (enable the `http` feature)")]
    HttpDisabled,
}

impl GatewayError {
    /// Worth retrying: connection problems, rate limiting and server errors.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport { .. } => true,
            GatewayError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub n_sequences: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { max_new_tokens: 15, temperature: 0.7, top_p: 0.7, n_sequences: 1 }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=1.0).contains(&self.top_p) {
            return Err(GatewayError::InvalidParams(format!("top_p {} outside [0, 1]", self.top_p)));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidParams(format!("temperature {} is negative", self.temperature)));
        }
        if self.n_sequences < 1 {
            return Err(GatewayError::InvalidParams("n_sequences must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub name: String,
    pub base_url: String,
    pub model_id: String,
    /// Environment variable holding the bearer token. Defaults to
    /// `QC_AUTH_<NAME>` with the name upper-cased and non-alphanumerics as `_`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auth_env: Option<String>,
    #[serde(default)]
    pub params: GenerationParams,
}

/// `QC_AUTH_<NAME>` for an endpoint name.
pub fn default_auth_env(name: &str) -> String {
    let suffix: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' }).collect();
    format!("QC_AUTH_{suffix}")
}

impl ModelEndpoint {
    pub fn new(name: impl Into<String>, base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            base_url: base_url.into(),
            model_id: model_id.into(),
            auth_env: None,
            params: GenerationParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |message: &str| GatewayError::InvalidEndpoint { name: self.name.clone(), message: message.into() };
        if self.name.trim().is_empty() {
            return Err(bad("name is empty"));
        }
        if self.model_id.trim().is_empty() {
            return Err(bad("model_id is empty"));
        }
        let rest = self
            .base_url
            .strip_prefix("http://")
            .or_else(|| self.base_url.strip_prefix("https://"))
            .ok_or_else(|| bad("base_url must start with http:// or https://"))?;
        if rest.is_empty() || rest.starts_with('/') || rest.contains(char::is_whitespace) {
            return Err(bad("base_url has no host"));
        }
        self.params.validate()
    }

    pub fn auth_env_var(&self) -> String {
        self.auth_env.clone().unwrap_or_else(|| default_auth_env(&self.name))
    }

    /// Token from the environment, if set and nonempty.
    pub fn auth_token(&self) -> Option<String> {
        std::env::var(self.auth_env_var()).ok().filter(|t| !t.is_empty())
    }

    pub fn chat_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

/// Stable digest of everything that determines a completion request.
pub fn cache_key(model_id: &str, prompt: &str, params: &GenerationParams) -> String {
    let canonical = json!({
        "model_id": model_id,
        "prompt": prompt,
        "params": {
            "max_new_tokens": params.max_new_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "n_sequences": params.n_sequences,
        },
    });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// The chat-completions request body for one prompt.
pub fn chat_request_body(endpoint: &ModelEndpoint, prompt: &str) -> Value {
    json!({
        "model": endpoint.model_id,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": endpoint.params.temperature,
        "top_p": endpoint.params.top_p,
        "max_tokens": endpoint.params.max_new_tokens,
        "n": endpoint.params.n_sequences,
    })
}

/// Completion texts from a chat-completions (or legacy completions) response.
pub fn parse_chat_response(endpoint: &str, body: &Value) -> Result<Vec<String>, GatewayError> {
    let proto = |message: &str| GatewayError::Protocol { endpoint: endpoint.to_string(), message: message.into() };
    let choices = body.get("choices").and_then(Value::as_array).ok_or_else(|| proto("missing `choices` array"))?;
    if choices.is_empty() {
        return Err(GatewayError::EmptyGeneration { endpoint: endpoint.to_string() });
    }
    choices
        .iter()
        .map(|c| {
            c.pointer("/message/content")
                .or_else(|| c.get("text"))
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| proto("choice without message.content"))
        })
        .collect()
}

/// Sends one rendered prompt and returns the completion texts.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, endpoint: &ModelEndpoint, prompt: &str) -> Result<Vec<String>, GatewayError>;
}

#[cfg(feature = "http")]
pub use http::{HttpEmbedder, HttpTransport};

#[cfg(feature = "http")]
mod http {
    use super::*;

    fn agent(timeout: Duration) -> ureq::Agent {
        ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into()
    }

    pub(super) fn post_json(
        agent: &ureq::Agent,
        endpoint: &str,
        url: &str,
        token: Option<&str>,
        body: &Value,
    ) -> Result<Value, GatewayError> {
        log::debug!(
            "POST {url} authorization={} body={body}",
            if token.is_some() { "Bearer ***" } else { "none" }
        );
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(t) = token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let transport = |e: ureq::Error| GatewayError::Transport {
            endpoint: endpoint.to_string(),
            attempts: 1,
            message: e.to_string(),
        };
        let mut resp = req.send(body.to_string()).map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        log::debug!("{url} -> {status} {text}");
        if !(200..300).contains(&status) {
            return Err(GatewayError::Status { endpoint: endpoint.to_string(), status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Protocol {
            endpoint: endpoint.to_string(),
            message: format!("body is not JSON: {e}"),
        })
    }

    /// Blocking HTTP transport for chat-completions servers.
    pub struct HttpTransport {
        agent: ureq::Agent,
    }

    impl HttpTransport {
        pub fn new(timeout: Duration) -> Self {
            Self { agent: agent(timeout) }
        }
    }

    impl Default for HttpTransport {
        fn default() -> Self {
            Self::new(Duration::from_secs(120))
        }
    }

    impl ChatTransport for HttpTransport {
        fn complete(&self, endpoint: &ModelEndpoint, prompt: &str) -> Result<Vec<String>, GatewayError> {
            let body = chat_request_body(endpoint, prompt);
            let token = endpoint.auth_token();
            let value = post_json(&self.agent, &endpoint.name, &endpoint.chat_url(), token.as_deref(), &body)?;
            parse_chat_response(&endpoint.name, &value)
        }
    }

    /// Token-level embeddings from `POST <base>/embeddings` with
    /// `"granularity": "token"`; expects `{"tokens": [...], "embeddings": [[...], ...]}`.
    pub struct HttpEmbedder {
        pub name: String,
        pub base_url: String,
        pub model_id: String,
        pub auth_env: Option<String>,
        agent: ureq::Agent,
    }

    impl HttpEmbedder {
        pub fn new(name: impl Into<String>, base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
            Self {
                name: name.into(),
                base_url: base_url.into(),
                model_id: model_id.into(),
                auth_env: None,
                agent: agent(Duration::from_secs(120)),
            }
        }
    }

    impl TokenEmbedder for HttpEmbedder {
        fn id(&self) -> String {
            format!("http:{}:{}", self.base_url, self.model_id)
        }

        fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddingSet, GatewayError> {
            if text.trim().is_empty() {
                return Err(GatewayError::EmptyText);
            }
            let url = format!("{}/embeddings", self.base_url.trim_end_matches('/'));
            let body = json!({"model": self.model_id, "input": text, "granularity": "token"});
            let var = self.auth_env.clone().unwrap_or_else(|| default_auth_env(&self.name));
            let token = std::env::var(var).ok().filter(|t| !t.is_empty());
            let value = post_json(&self.agent, &self.name, &url, token.as_deref(), &body)?;
            parse_token_embeddings(&self.name, &value)
        }
    }
}

/// Reads a token-level embedding response; an OpenAI-style sentence-level
/// response (`data[].embedding`) is rejected with a contract error.
pub fn parse_token_embeddings(provider: &str, body: &Value) -> Result<TokenEmbeddingSet, GatewayError> {
    let proto = |message: String| GatewayError::Protocol { endpoint: provider.to_string(), message };
    let tokens = body.get("tokens").and_then(Value::as_array);
    let vectors = body.get("embeddings").and_then(Value::as_array);
    let (Some(tokens), Some(vectors)) = (tokens, vectors) else {
        if body.get("data").is_some() || body.get("embedding").is_some() {
            return Err(GatewayError::SentenceLevelEmbedding { provider: provider.to_string() });
        }
        return Err(proto("expected `tokens` and `embeddings` arrays".into()));
    };
    let tokens: Vec<String> = tokens
        .iter()
        .map(|t| t.as_str().map(str::to_string).ok_or_else(|| proto("token is not a string".into())))
        .collect::<Result<_, _>>()?;
    let vectors: Vec<Vec<f64>> = vectors
        .iter()
        .map(|v| {
            v.as_array()
                .ok_or_else(|| proto("embedding is not an array".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| proto("embedding value is not a number".into())))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    TokenEmbeddingSet::new(tokens, vectors).map_err(proto)
}

/// One stored completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedCompletion {
    pub cache_key: String,
    pub model_id: String,
    pub prompt: String,
    pub params: GenerationParams,
    pub choices: Vec<String>,
}

/// Directory of JSON records keyed by content digest. Writes go through one
/// lock and land atomically (temp file + rename).
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    writer: Mutex<()>,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(dir.join("embeddings"))
            .map_err(|source| GatewayError::Cache { path: dir.display().to_string(), source })?;
        Ok(Self { dir, writer: Mutex::new(()) })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn completion_path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    fn embedding_path(&self, key: &str) -> PathBuf {
        self.dir.join("embeddings").join(format!("{key}.json"))
    }

    fn read<T: serde::de::DeserializeOwned>(path: &Path) -> Option<T> {
        let text = fs::read_to_string(path).ok()?;
        match serde_json::from_str(&text) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("ignoring unreadable cache record {}: {e}", path.display());
                None
            }
        }
    }

    fn write<T: Serialize>(&self, path: &Path, value: &T) -> Result<(), GatewayError> {
        let err = |source| GatewayError::Cache { path: path.display().to_string(), source };
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let tmp = path.with_extension("json.tmp");
        let mut f = fs::File::create(&tmp).map_err(err)?;
        let bytes = serde_json::to_vec_pretty(value).expect("cache records serialize");
        f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(err)?;
        fs::rename(&tmp, path).map_err(err)
    }

    pub fn get(&self, key: &str) -> Option<CachedCompletion> {
        Self::read(&self.completion_path(key))
    }

    pub fn put(&self, record: &CachedCompletion) -> Result<(), GatewayError> {
        self.write(&self.completion_path(&record.cache_key), record)
    }

    pub fn get_embedding(&self, key: &str) -> Option<TokenEmbeddingSet> {
        Self::read(&self.embedding_path(key))
    }

    pub fn put_embedding(&self, key: &str, set: &TokenEmbeddingSet) -> Result<(), GatewayError> {
        self.write(&self.embedding_path(key), set)
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
        }
        *free -= 1;
        LimiterGuard(self)
    }
}

struct LimiterGuard<'a>(&'a Limiter);

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCode {
    pub pair_id: String,
    pub endpoint: String,
    pub template_id: String,
    pub k: usize,
    pub raw: String,
    pub code: String,
    pub cache_key: String,
    pub from_cache: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, initial_backoff: Duration::from_millis(250) }
    }
}

pub const DEFAULT_CONCURRENCY: usize = 4;

/// Cache-first generation over a pluggable transport.
pub struct Gateway {
    transport: Box<dyn ChatTransport>,
    cache: Option<ResponseCache>,
    offline: bool,
    retry: RetryPolicy,
    limiter: Limiter,
    network_calls: AtomicUsize,
}

impl Gateway {
    pub fn new(transport: Box<dyn ChatTransport>) -> Self {
        Self {
            transport,
            cache: None,
            offline: false,
            retry: RetryPolicy::default(),
            limiter: Limiter::new(DEFAULT_CONCURRENCY),
            network_calls: AtomicUsize::new(0),
        }
    }

    #[cfg(feature = "http")]
    pub fn http() -> Self {
        Self::new(Box::new(HttpTransport::default()))
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    /// Refuse to reach the network; cache misses become errors.
    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.limiter = Limiter::new(n);
        self
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }

    /// Requests sent to the transport so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    fn complete_with_retry(&self, endpoint: &ModelEndpoint, prompt: &str) -> Result<Vec<String>, GatewayError> {
        let _slot = self.limiter.acquire();
        let mut backoff = self.retry.initial_backoff;
        let attempts = self.retry.max_attempts.max(1);
        for attempt in 1..=attempts {
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            match self.transport.complete(endpoint, prompt) {
                Ok(choices) => return Ok(choices),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::warn!("{}: attempt {attempt}/{attempts} failed: {e}; retrying in {backoff:?}", endpoint.name);
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
                Err(GatewayError::Transport { endpoint, message, .. }) => {
                    return Err(GatewayError::Transport { endpoint, attempts: attempt, message })
                }
                Err(e) => return Err(e),
            }
        }
        unreachable!("loop returns on the last attempt")
    }

    /// Raw completion texts for a prompt, from cache when possible.
    pub fn complete(&self, endpoint: &ModelEndpoint, prompt: &str) -> Result<(CachedCompletion, bool), GatewayError> {
        endpoint.validate()?;
        let key = cache_key(&endpoint.model_id, prompt, &endpoint.params);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            return Ok((hit, true));
        }
        if self.offline {
            return Err(GatewayError::CacheMiss { key });
        }
        let choices = self.complete_with_retry(endpoint, prompt)?;
        let record = CachedCompletion {
            cache_key: key,
            model_id: endpoint.model_id.clone(),
            prompt: prompt.to_string(),
            params: endpoint.params,
            choices,
        };
        if let Some(cache) = &self.cache {
            cache.put(&record)?;
        }
        Ok((record, false))
    }

    /// Generates a code for one rendered prompt. The first returned sequence
    /// is used.
    pub fn generate(
        &self,
        endpoint: &ModelEndpoint,
        prompt: &RenderedPrompt,
        pair_id: &str,
    ) -> Result<GeneratedCode, GatewayError> {
        let (record, from_cache) = self.complete(endpoint, &prompt.text)?;
        let raw = record.choices.first().cloned().unwrap_or_default();
        let code = postprocess_code(&raw).map_err(|_| GatewayError::EmptyGeneration { endpoint: endpoint.name.clone() })?;
        Ok(GeneratedCode {
            pair_id: pair_id.to_string(),
            endpoint: endpoint.name.clone(),
            template_id: prompt.template_id.clone(),
            k: prompt.shot_ids.len(),
            raw,
            code,
            cache_key: record.cache_key,
            from_cache,
        })
    }
}

/// Maps text to one vector per token.
pub trait TokenEmbedder: Send + Sync {
    /// Identifies the provider and model in cache keys and run manifests.
    fn id(&self) -> String;
    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddingSet, GatewayError>;
}

/// Deterministic offline embedder: every distinct token (ROUGE tokenizer)
/// gets a pseudo-random unit vector seeded by its SHA-256.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StubEmbedder {
    pub dim: usize,
}

impl Default for StubEmbedder {
    fn default() -> Self {
        Self { dim: 32 }
    }
}

impl StubEmbedder {
    pub fn vector(&self, token: &str) -> Vec<f64> {
        let seed: [u8; 32] = Sha256::digest(token.as_bytes()).into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        loop {
            let v: Vec<f64> = (0..self.dim.max(1)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

impl TokenEmbedder for StubEmbedder {
    fn id(&self) -> String {
        format!("stub:{}", self.dim)
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddingSet, GatewayError> {
        let tokens = tokenize_for_rouge(text);
        if tokens.is_empty() {
            return Err(GatewayError::EmptyText);
        }
        let vectors = tokens.iter().map(|t| self.vector(t)).collect();
        Ok(TokenEmbeddingSet { tokens, vectors })
    }
}

/// Wraps an embedder with the response cache.
pub struct CachingEmbedder<'a, E: TokenEmbedder + ?Sized> {
    pub inner: &'a E,
    pub cache: &'a ResponseCache,
    pub offline: bool,
}

impl<E: TokenEmbedder + ?Sized> TokenEmbedder for CachingEmbedder<'_, E> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn embed_tokens(&self, text: &str) -> Result<TokenEmbeddingSet, GatewayError> {
        let key = hex::encode(Sha256::digest(format!("{}\u{0}{}", self.inner.id(), text).as_bytes()));
        if let Some(hit) = self.cache.get_embedding(&key) {
            return Ok(hit);
        }
        if self.offline {
            return Err(GatewayError::CacheMiss { key });
        }
        let set = self.inner.embed_tokens(text)?;
        self.cache.put_embedding(&key, &set)?;
        Ok(set)
    }
}
