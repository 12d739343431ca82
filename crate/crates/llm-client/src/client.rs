//! Chat-completion client with a reply cache, retries and a bound on
//! in-flight requests.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::cache::ReplyCache;
use crate::{ClientError, EndpointConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: "user".into(), content: content.into() }
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [Message],
    temperature: f64,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: Message,
}

/// Counters for requests that reached the network.
#[derive(Debug, Default)]
pub struct ClientStats {
    pub http_attempts: AtomicUsize,
    pub retries: AtomicUsize,
    pub cache_hits: AtomicUsize,
}

impl ClientStats {
    pub fn attempts(&self) -> usize {
        self.http_attempts.load(Ordering::SeqCst)
    }

    pub fn retries(&self) -> usize {
        self.retries.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }
}

pub struct ChatClient {
    cfg: EndpointConfig,
    http: reqwest::Client,
    key: String,
    cache: ReplyCache,
    permits: Arc<Semaphore>,
    stats: Arc<ClientStats>,
}

impl std::fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatClient")
            .field("base_url", &self.cfg.base_url)
            .field("model", &self.cfg.model)
            .finish_non_exhaustive()
    }
}

impl ChatClient {
    /// Reads the key from the configured environment variable.
    pub fn from_env(cfg: EndpointConfig) -> Result<Self, ClientError> {
        let key = cfg.api_key()?;
        Self::with_key(cfg, key)
    }

    pub fn with_key(cfg: EndpointConfig, key: String) -> Result<Self, ClientError> {
        cfg.validate()?;
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| ClientError::Transport(e.without_url().to_string()))?;
        let cache = ReplyCache::new(&cfg.cache_dir)?;
        let permits = Arc::new(Semaphore::new(cfg.max_parallel));
        Ok(Self { cfg, http, key, cache, permits, stats: Arc::default() })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &ClientStats {
        &self.stats
    }

    /// Reply text of the first choice, served from the cache when the same
    /// request was answered before.
    pub async fn complete(&self, messages: &[Message]) -> Result<String, ClientError> {
        let request = ChatRequest { model: &self.cfg.model, messages, temperature: self.cfg.temperature };
        let key = ReplyCache::key(&request);
        if let Some(hit) = self.cache.get(&key) {
            self.stats.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit);
        }
        let reply = {
            let _permit = self.permits.acquire().await.expect("semaphore never closed");
            self.send_with_retries(&request).await?
        };
        self.cache.put(&key, &reply)?;
        Ok(reply)
    }

    async fn send_with_retries(&self, request: &ChatRequest<'_>) -> Result<String, ClientError> {
        let url = format!("{}/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut attempt = 0u32;
        loop {
            self.stats.http_attempts.fetch_add(1, Ordering::SeqCst);
            let outcome = self.http.post(&url).bearer_auth(&self.key).json(request).send().await;
            let retryable = match outcome {
                Ok(resp) if resp.status().is_success() => {
                    let body: ChatResponse =
                        resp.json().await.map_err(|e| ClientError::Transport(e.without_url().to_string()))?;
                    return body
                        .choices
                        .into_iter()
                        .next()
                        .map(|c| c.message.content)
                        .ok_or_else(|| ClientError::Transport("reply has no choices".into()));
                }
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_server_error() || status.as_u16() == 429 {
                        format!("status {status}")
                    } else {
                        return Err(ClientError::Status(status.as_u16()));
                    }
                }
                Err(e) => e.without_url().to_string(),
            };
            if attempt >= self.cfg.max_retries {
                return Err(ClientError::RetriesExhausted { attempts: attempt + 1, last: retryable });
            }
            let delay = self.cfg.backoff_base_secs * 2f64.powi(attempt as i32);
            log::warn!("request failed ({retryable}); retry {} in {delay:.2}s", attempt + 1);
            tokio::time::sleep(Duration::from_secs_f64(delay)).await;
            self.stats.retries.fetch_add(1, Ordering::SeqCst);
            attempt += 1;
        }
    }
}
