//! OpenAI-compatible HTTP backends.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{check_embed_input, check_uniform_dim, BackendConfig, BackendError, ChatModel, ChatRequest, Embedder};

#[derive(Debug, Clone, PartialEq)]
pub enum TransportFailure {
    Timeout,
    Io(String),
}

/// One JSON POST. Returns the status code and raw body.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        timeout: Duration,
        api_key: Option<&str>,
    ) -> Result<(u16, String), TransportFailure>;
}

#[derive(Debug, Default, Clone)]
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        body: &Value,
        timeout: Duration,
        api_key: Option<&str>,
    ) -> Result<(u16, String), TransportFailure> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send(body.to_string()).map_err(classify)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(classify)?;
        Ok((status, text))
    }
}

fn classify(err: ureq::Error) -> TransportFailure {
    match err {
        ureq::Error::Timeout(_) => TransportFailure::Timeout,
        other => TransportFailure::Io(other.to_string()),
    }
}

/// Counting semaphore bounding in-flight requests per backend instance.
#[derive(Debug)]
struct Limiter {
    max: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Shared request machinery: concurrency limit, retries with fixed backoff.
struct Client<T> {
    config: BackendConfig,
    transport: T,
    limiter: Limiter,
    backoff: Duration,
}

impl<T: Transport> Client<T> {
    fn new(config: BackendConfig, transport: T) -> Result<Self, BackendError> {
        config.validate().map_err(BackendError::InvalidInput)?;
        Ok(Self {
            limiter: Limiter::new(config.concurrency_limit),
            config,
            transport,
            backoff: Duration::from_millis(250),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.config.base_url.trim_end_matches('/'))
    }

    /// POSTs `body`, retrying transport failures, timeouts, 429 and 5xx.
    fn post(&self, path: &str, body: &Value) -> Result<String, BackendError> {
        let url = self.url(path);
        let attempts = self.config.retries.max(1);
        let mut last = BackendError::Transport {
            attempts: 0,
            message: "no attempt made".into(),
        };
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(self.backoff);
            }
            let outcome = {
                let _permit = self.limiter.acquire();
                self.transport.post_json(
                    &url,
                    body,
                    self.config.timeout,
                    self.config.api_key.as_deref(),
                )
            };
            match outcome {
                Ok((status, text)) if (200..300).contains(&status) => return Ok(text),
                Ok((status, text)) => {
                    last = BackendError::Status { status, body: text };
                    if status != 429 && status < 500 {
                        return Err(last);
                    }
                }
                Err(TransportFailure::Timeout) => last = BackendError::Timeout { attempts: attempt },
                Err(TransportFailure::Io(message)) => {
                    last = BackendError::Transport {
                        attempts: attempt,
                        message,
                    }
                }
            }
            log::debug!("request to {url} failed (attempt {attempt}/{attempts}): {last}");
        }
        Err(last)
    }
}

/// Chat completions over an OpenAI-compatible `/chat/completions` endpoint.
pub struct OpenAiChat<T = UreqTransport> {
    client: Client<T>,
}

impl OpenAiChat<UreqTransport> {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        Self::with_transport(config, UreqTransport)
    }
}

impl<T: Transport> OpenAiChat<T> {
    pub fn with_transport(config: BackendConfig, transport: T) -> Result<Self, BackendError> {
        Ok(Self {
            client: Client::new(config, transport)?,
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.client.backoff = backoff;
        self
    }

    pub fn request_body(&self, req: &ChatRequest) -> Value {
        json!({
            "model": self.client.config.model_name,
            "messages": [
                { "role": "system", "content": req.system },
                { "role": "user", "content": req.user },
            ],
            "max_tokens": req.max_output_tokens,
            "temperature": req.temperature,
        })
    }
}

impl<T: Transport> ChatModel for OpenAiChat<T> {
    fn chat(&self, req: &ChatRequest) -> Result<String, BackendError> {
        req.validate(self.client.config.max_input_tokens)?;
        let text = self.client.post("chat/completions", &self.request_body(req))?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let content = v
            .pointer("/choices/0/message/content")
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))?;
        match content {
            Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
            Value::String(_) | Value::Null => Err(BackendError::EmptyCompletion),
            _ => Err(BackendError::Malformed("message content is not a string".into())),
        }
    }
}

/// Embeddings over an OpenAI-compatible `/embeddings` endpoint.
pub struct HttpEmbedder<T = UreqTransport> {
    client: Client<T>,
}

impl HttpEmbedder<UreqTransport> {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        Self::with_transport(config, UreqTransport)
    }
}

impl<T: Transport> HttpEmbedder<T> {
    pub fn with_transport(config: BackendConfig, transport: T) -> Result<Self, BackendError> {
        Ok(Self {
            client: Client::new(config, transport)?,
        })
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.client.backoff = backoff;
        self
    }
}

impl<T: Transport> Embedder for HttpEmbedder<T> {
    fn identifier(&self) -> String {
        format!("http:{}", self.client.config.model_name)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        check_embed_input(texts)?;
        let body = json!({ "model": self.client.config.model_name, "input": texts });
        let text = self.client.post("embeddings", &body)?;
        let v: Value =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        let data = v
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Malformed("missing `data` array".into()))?;
        if data.len() != texts.len() {
            return Err(BackendError::Malformed(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .map_or(pos, |i| i as usize);
            let vector: Vec<f64> = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| BackendError::Malformed("item without `embedding`".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| BackendError::Malformed("non-numeric embedding".into())))
                .collect::<Result<_, _>>()?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|(i, _)| *i);
        let vectors: Vec<Vec<f64>> = rows.into_iter().map(|(_, v)| v).collect();
        check_uniform_dim(&vectors)?;
        Ok(vectors)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    use super::*;

    /// Transport double that records peak concurrency and replies with a fixed body.
    struct Recorder {
        in_flight: AtomicUsize,
        peak: AtomicUsize,
        calls: AtomicUsize,
        reply: (u16, String),
    }

    impl Recorder {
        fn new(status: u16, body: &str) -> Arc<Self> {
            Arc::new(Self {
                in_flight: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
                calls: AtomicUsize::new(0),
                reply: (status, body.to_string()),
            })
        }
    }

    impl Transport for Arc<Recorder> {
        fn post_json(&self, _: &str, _: &Value, _: Duration, _: Option<&str>) -> Result<(u16, String), TransportFailure> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(15));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok(self.reply.clone())
        }
    }

    struct Failing(TransportFailure, AtomicUsize);

    impl Transport for Failing {
        fn post_json(&self, _: &str, _: &Value, _: Duration, _: Option<&str>) -> Result<(u16, String), TransportFailure> {
            self.1.fetch_add(1, Ordering::SeqCst);
            Err(self.0.clone())
        }
    }

    fn config(limit: usize, retries: u32) -> BackendConfig {
        BackendConfig {
            model_name: "m".into(),
            concurrency_limit: limit,
            retries,
            ..Default::default()
        }
    }

    fn chat_reply(content: &str) -> String {
        json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
    }

    #[test]
    fn concurrency_limit_is_never_exceeded() {
        let rec = Recorder::new(200, &chat_reply("ok"));
        let chat = Arc::new(OpenAiChat::with_transport(config(3, 1), rec.clone()).unwrap());
        std::thread::scope(|s| {
            for _ in 0..16 {
                let chat = chat.clone();
                s.spawn(move || {
                    let req = ChatRequest::new("sys".into(), "hi".into(), 8);
                    assert_eq!(chat.chat(&req).unwrap(), "ok");
                });
            }
        });
        assert_eq!(rec.calls.load(Ordering::SeqCst), 16);
        assert!(rec.peak.load(Ordering::SeqCst) <= 3);
        assert!(rec.peak.load(Ordering::SeqCst) >= 2, "test should actually overlap requests");
    }

    #[test]
    fn error_kinds_are_distinct() {
        let timeout = Failing(TransportFailure::Timeout, AtomicUsize::new(0));
        let chat = OpenAiChat::with_transport(config(1, 2), timeout)
            .unwrap()
            .with_backoff(Duration::ZERO);
        let req = ChatRequest::new("s".into(), "u".into(), 8);
        assert_eq!(chat.chat(&req).unwrap_err(), BackendError::Timeout { attempts: 2 });

        let chat = OpenAiChat::with_transport(config(1, 3), Recorder::new(400, "bad")).unwrap();
        assert_eq!(
            chat.chat(&req).unwrap_err(),
            BackendError::Status { status: 400, body: "bad".into() }
        );

        let chat = OpenAiChat::with_transport(config(1, 1), Recorder::new(200, &chat_reply("  "))).unwrap();
        assert_eq!(chat.chat(&req).unwrap_err(), BackendError::EmptyCompletion);
    }

    #[test]
    fn server_errors_are_retried_client_errors_are_not() {
        let rec = Recorder::new(503, "busy");
        let chat = OpenAiChat::with_transport(config(1, 3), rec.clone())
            .unwrap()
            .with_backoff(Duration::ZERO);
        let req = ChatRequest::new("s".into(), "u".into(), 8);
        assert!(matches!(chat.chat(&req), Err(BackendError::Status { status: 503, .. })));
        assert_eq!(rec.calls.load(Ordering::SeqCst), 3);

        let rec = Recorder::new(404, "nope");
        let chat = OpenAiChat::with_transport(config(1, 3), rec.clone()).unwrap();
        assert!(chat.chat(&req).is_err());
        assert_eq!(rec.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn budget_is_checked_before_transport() {
        let rec = Recorder::new(200, &chat_reply("x"));
        let mut cfg = config(1, 1);
        cfg.max_input_tokens = 4;
        let chat = OpenAiChat::with_transport(cfg, rec.clone()).unwrap();
        let req = ChatRequest::new("system".into(), "a long user message".into(), 8);
        assert!(matches!(chat.chat(&req), Err(BackendError::Budget { .. })));
        assert_eq!(rec.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn embeddings_follow_reported_index() {
        let body = json!({ "data": [
            { "index": 1, "embedding": [0.0, 1.0] },
            { "index": 0, "embedding": [1.0, 0.0] },
        ]})
        .to_string();
        let emb = HttpEmbedder::with_transport(config(1, 1), Recorder::new(200, &body)).unwrap();
        let v = emb.embed_texts(&["a".into(), "b".into()]).unwrap();
        assert_eq!(v, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn embedding_dimension_drift_is_an_error() {
        let body = json!({ "data": [
            { "index": 0, "embedding": [1.0, 0.0] },
            { "index": 1, "embedding": [1.0] },
        ]})
        .to_string();
        let emb = HttpEmbedder::with_transport(config(1, 1), Recorder::new(200, &body)).unwrap();
        assert!(matches!(
            emb.embed_texts(&["a".into(), "b".into()]),
            Err(BackendError::DimensionDrift { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn unreachable_server_fails_after_all_attempts() {
        // nothing listens on the discard port of loopback
        let cfg = BackendConfig {
            base_url: "http://127.0.0.1:9/v1".into(),
            timeout: Duration::from_secs(2),
            ..config(1, 2)
        };
        let emb = HttpEmbedder::new(cfg).unwrap().with_backoff(Duration::from_millis(1));
        match emb.embed_texts(&["a".into()]) {
            Err(BackendError::Transport { attempts, .. }) | Err(BackendError::Timeout { attempts }) => assert_eq!(attempts, 2),
            other => panic!("expected a transport failure, got {other:?}"),
        }
    }
}
