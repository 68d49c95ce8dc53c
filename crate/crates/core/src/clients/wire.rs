//! HTTP JSON model clients.
//!
//! The reasoner speaks the hosted chat-completions format. Captioner and
//! embedder use a thin adapter format:
//!
//! ```text
//! captioner  POST {"model", "image_b64" | "image_url"}        -> {"caption"}
//! embedder   POST {"model", "text" | "image_b64" | "image_url"} -> {"embedding": [..]}
//! ```
//!
//! All three calls are read-only, so a failed request is retried whole, up to
//! `max_retries` times with jittered exponential backoff.

use std::env;
use std::time::Duration;

use base64::Engine;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{Captioner, Embedder, Limiter, ModelEndpointConfig, Reasoner, ResolvedImage, Role};
use crate::error::{Error, Result};
use crate::model::{single_line, EmbeddingVector};

const JITTER: f64 = 0.2;

enum Attempt {
    Retry(String),
    Fatal(Error),
}

struct HttpEndpoint {
    config: ModelEndpointConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
    limiter: Limiter,
}

impl HttpEndpoint {
    fn new(config: ModelEndpointConfig, role: Role) -> Result<Self> {
        config.validate()?;
        config.expect_role(role)?;
        let api_key = if config.api_key_env.is_empty() {
            None
        } else {
            Some(env::var(&config.api_key_env).map_err(|_| {
                Error::Config(format!(
                    "environment variable `{}` (API key for {}) is not set",
                    config.api_key_env, config.model_id
                ))
            })?)
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            limiter: Limiter::new(config.max_concurrency),
            config,
            agent,
            api_key,
        })
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let base = self.config.backoff_base_ms as f64 * 2f64.powi(attempt as i32);
        let factor = 1.0 + rand::rng().random_range(-JITTER..=JITTER);
        Duration::from_millis((base * factor).round() as u64)
    }

    fn post<T: DeserializeOwned>(&self, url: &str, body: &Value) -> Result<T> {
        let _permit = self.limiter.acquire();
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                let wait = self.backoff(attempt - 1);
                debug!(model = %self.config.model_id, attempt, ?wait, "retrying");
                std::thread::sleep(wait);
            }
            match self.try_post(url, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    warn!(model = %self.config.model_id, attempt, "{msg}");
                    last = msg;
                }
            }
        }
        Err(Error::ClientUnavailable(format!(
            "{} failed after {} attempts: {last}",
            self.config.model_id,
            self.config.max_retries + 1
        )))
    }

    fn try_post<T: DeserializeOwned>(&self, url: &str, body: &Value) -> Result<T, Attempt> {
        let mut request = self.agent.post(url);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| Attempt::Retry(format!("transport error: {e}")))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if !(200..300).contains(&status) {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            return Err(Attempt::Fatal(Error::ClientUnavailable(format!(
                "{} rejected request: HTTP {status}: {text}",
                self.config.model_id
            ))));
        }
        response
            .body_mut()
            .read_json::<T>()
            .map_err(|e| Attempt::Retry(format!("unreadable response body: {e}")))
    }
}

fn image_payload(image: &ResolvedImage<'_>) -> (&'static str, String) {
    match &image.bytes {
        Some(bytes) => (
            "image_b64",
            base64::engine::general_purpose::STANDARD.encode(bytes.as_slice()),
        ),
        None => ("image_url", image.record.uri.clone()),
    }
}

pub struct WireCaptioner(HttpEndpoint);

impl WireCaptioner {
    pub fn new(config: ModelEndpointConfig) -> Result<Self> {
        HttpEndpoint::new(config, Role::Captioner).map(Self)
    }
}

#[derive(Deserialize)]
struct CaptionReply {
    caption: Option<String>,
}

impl Captioner for WireCaptioner {
    fn model_id(&self) -> &str {
        &self.0.config.model_id
    }

    fn caption_image(&self, image: &ResolvedImage<'_>) -> Result<String> {
        let (field, payload) = image_payload(image);
        let mut body = json!({ "model": self.0.config.model_id });
        body[field] = Value::String(payload);
        let reply: CaptionReply = self.0.post(&self.0.config.base_url, &body)?;
        let caption = single_line(reply.caption.as_deref().unwrap_or(""));
        if caption.is_empty() {
            return Err(Error::EmptyModelOutput(format!(
                "captioner returned no text for `{}`",
                image.record.id
            )));
        }
        Ok(caption)
    }
}

pub struct WireReasoner(HttpEndpoint);

impl WireReasoner {
    pub fn new(config: ModelEndpointConfig) -> Result<Self> {
        HttpEndpoint::new(config, Role::Reasoner).map(Self)
    }

    fn url(&self) -> String {
        let base = self.0.config.base_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

impl Reasoner for WireReasoner {
    fn model_id(&self) -> &str {
        &self.0.config.model_id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let cfg = &self.0.config;
        let mut body = json!({
            "model": cfg.model_id,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": cfg.temperature,
        });
        if let Some(max_tokens) = cfg.max_tokens {
            body["max_tokens"] = json!(max_tokens);
        }
        let reply: ChatReply = self.0.post(&self.url(), &body)?;
        let content = reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if content.trim().is_empty() {
            return Err(Error::EmptyModelOutput("reasoner returned an empty reply".into()));
        }
        Ok(content)
    }
}

pub struct WireEmbedder(HttpEndpoint);

impl WireEmbedder {
    pub fn new(config: ModelEndpointConfig) -> Result<Self> {
        HttpEndpoint::new(config, Role::Embedder).map(Self)
    }

    fn request(&self, field: &str, payload: String) -> Result<EmbeddingVector> {
        let mut body = json!({ "model": self.0.config.model_id });
        body[field] = Value::String(payload);
        let reply: EmbeddingReply = self.0.post(&self.0.config.base_url, &body)?;
        if reply.embedding.is_empty() {
            return Err(Error::EmptyModelOutput("embedder returned an empty vector".into()));
        }
        EmbeddingVector::new(reply.embedding)
    }
}

#[derive(Deserialize)]
struct EmbeddingReply {
    #[serde(default)]
    embedding: Vec<f32>,
}

impl Embedder for WireEmbedder {
    fn model_id(&self) -> &str {
        &self.0.config.model_id
    }

    fn dim(&self) -> Option<usize> {
        self.0.config.dim
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.request("text", text.to_string())
    }

    fn embed_image(&self, image: &ResolvedImage<'_>) -> Result<EmbeddingVector> {
        let (field, payload) = image_payload(image);
        self.request(field, payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::ClientSet;
    use crate::model::ImageRecord;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::{Arc, Mutex};

    /// Minimal HTTP/1.1 responder: serves the scripted (status, body) pairs in
    /// order, repeating the last one, and records request bodies.
    struct Script {
        url: String,
        hits: Arc<AtomicUsize>,
        bodies: Arc<Mutex<Vec<String>>>,
    }

    fn serve(responses: Vec<(u16, String)>) -> Script {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let (h, b) = (hits.clone(), bodies.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut body = vec![0u8; len];
                let _ = reader.read_exact(&mut body);
                b.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
                let n = h.fetch_add(1, Ordering::SeqCst);
                let (status, text) = &responses[n.min(responses.len() - 1)];
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        Script { url, hits, bodies }
    }

    fn cfg(role: Role, url: &str, retries: u32) -> ModelEndpointConfig {
        ModelEndpointConfig {
            max_retries: retries,
            backoff_base_ms: 1,
            timeout_ms: 2_000,
            ..ModelEndpointConfig::new(role, url, "m")
        }
    }

    #[test]
    fn unavailable_after_retries_exhausted() {
        let server = serve(vec![(503, "{}".into())]);
        let c = WireCaptioner::new(cfg(Role::Captioner, &server.url, 2)).unwrap();
        let img = ImageRecord::new("img1", "http://x/img1.jpg");
        let err = c.caption_image(&ResolvedImage::remote(&img)).unwrap_err();
        assert!(matches!(err, Error::ClientUnavailable(_)), "{err}");
        assert_eq!(server.hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_then_succeeds() {
        let server = serve(vec![
            (503, "{}".into()),
            (200, r#"{"caption":"a dog\non grass"}"#.into()),
        ]);
        let c = WireCaptioner::new(cfg(Role::Captioner, &server.url, 2)).unwrap();
        let img = ImageRecord::new("img1", "http://x/img1.jpg");
        assert_eq!(c.caption_image(&ResolvedImage::remote(&img)).unwrap(), "a dog on grass");
        let body: Value = serde_json::from_str(&server.bodies.lock().unwrap()[1]).unwrap();
        assert_eq!(body["image_url"], "http://x/img1.jpg");
        assert_eq!(body["model"], "m");
    }

    #[test]
    fn client_errors_are_not_retried() {
        let server = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        let c = WireCaptioner::new(cfg(Role::Captioner, &server.url, 3)).unwrap();
        let img = ImageRecord::new("img1", "u");
        assert!(matches!(
            c.caption_image(&ResolvedImage::remote(&img)),
            Err(Error::ClientUnavailable(_))
        ));
        assert_eq!(server.hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn timeout_is_unavailable() {
        // Accepts connections but never answers.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        std::thread::spawn(move || {
            let mut held = Vec::new();
            for s in listener.incoming() {
                held.push(s);
            }
        });
        let r = WireReasoner::new(ModelEndpointConfig {
            timeout_ms: 100,
            ..cfg(Role::Reasoner, &url, 0)
        })
        .unwrap();
        assert!(matches!(r.complete("hi"), Err(Error::ClientUnavailable(_))));
    }

    #[test]
    fn chat_completion_wire_format() {
        let server = serve(vec![(
            200,
            r#"{"choices":[{"message":{"role":"assistant","content":"Edited Description: x"}}]}"#.into(),
        )]);
        let r = WireReasoner::new(cfg(Role::Reasoner, &server.url, 0)).unwrap();
        assert_eq!(r.complete("p").unwrap(), "Edited Description: x");
        let body: Value = serde_json::from_str(&server.bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "p");
        assert_eq!(body["temperature"], 0.0);

        let empty = serve(vec![(200, r#"{"choices":[{"message":{"content":"  "}}]}"#.into())]);
        let r = WireReasoner::new(cfg(Role::Reasoner, &empty.url, 0)).unwrap();
        assert!(matches!(r.complete("p"), Err(Error::EmptyModelOutput(_))));
    }

    #[test]
    fn embedder_dim_checked_against_config() {
        let server = serve(vec![(200, r#"{"embedding":[1.0,2.0,3.0]}"#.into())]);
        let e = WireEmbedder::new(ModelEndpointConfig {
            dim: Some(4),
            ..cfg(Role::Embedder, &server.url, 0)
        })
        .unwrap();
        let set = ClientSet::from_fixture(crate::clients::MockFixture::new(4))
            .unwrap()
            .with_embedder(Arc::new(e));
        assert!(matches!(
            set.embed_text("a dog"),
            Err(Error::DimMismatch { expected: 4, actual: 3 })
        ));
        let img = ImageRecord::new("i", "u");
        let bytes = Arc::new(vec![1u8, 2, 3]);
        let resolved = ResolvedImage {
            record: &img,
            bytes: Some(bytes),
        };
        assert!(set.embed_image(&resolved).is_err());
        let body: Value = serde_json::from_str(&server.bodies.lock().unwrap()[1]).unwrap();
        assert_eq!(body["image_b64"], "AQID");
    }

    #[test]
    fn missing_api_key_env_is_config_error() {
        let c = ModelEndpointConfig {
            api_key_env: "CIR_TEST_SURELY_UNSET_KEY".into(),
            ..cfg(Role::Reasoner, "http://127.0.0.1:9", 0)
        };
        assert!(matches!(WireReasoner::new(c), Err(Error::Config(_))));
        let wrong_role = cfg(Role::Embedder, "http://127.0.0.1:9", 0);
        assert!(WireReasoner::new(wrong_role).is_err());
    }

    #[test]
    fn backoff_grows_with_jitter_bounds() {
        let e = HttpEndpoint::new(
            ModelEndpointConfig {
                backoff_base_ms: 250,
                ..cfg(Role::Reasoner, "http://x", 0)
            },
            Role::Reasoner,
        )
        .unwrap();
        for attempt in 0..3 {
            let nominal = 250.0 * 2f64.powi(attempt);
            let ms = e.backoff(attempt as u32).as_millis() as f64;
            assert!(ms >= nominal * 0.8 - 1.0 && ms <= nominal * 1.2 + 1.0, "{ms}");
        }
    }
}
