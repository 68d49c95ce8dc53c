//! Contracts for the three external model roles: captioner, reasoner, embedder.
//!
//! Concrete models are configuration. [`mock`] provides pure, offline
//! implementations driven by a fixture file; [`wire`] talks HTTP JSON.

pub mod mock;
pub mod wire;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingVector, ImageRecord};

pub use mock::{hash_embed, MockCaptioner, MockEmbedder, MockFixture, MockReasoner};
pub use wire::{WireCaptioner, WireEmbedder, WireReasoner};

/// An image as handed to a client: its record plus file bytes when the uri
/// names a readable local file.
#[derive(Debug, Clone)]
pub struct ResolvedImage<'a> {
    pub record: &'a ImageRecord,
    pub bytes: Option<Arc<Vec<u8>>>,
}

impl<'a> ResolvedImage<'a> {
    pub fn remote(record: &'a ImageRecord) -> Self {
        Self {
            record,
            bytes: None,
        }
    }
}

pub trait Captioner: Send + Sync {
    fn model_id(&self) -> &str;

    /// Describes the image in one line of text.
    fn caption_image(&self, image: &ResolvedImage<'_>) -> Result<String>;
}

pub trait Reasoner: Send + Sync {
    fn model_id(&self) -> &str;

    /// Raw reply to a single-message prompt. Parsing is the caller's job.
    fn complete(&self, prompt: &str) -> Result<String>;
}

pub trait Embedder: Send + Sync {
    fn model_id(&self) -> &str;

    /// Advertised output dimension, if known up front.
    fn dim(&self) -> Option<usize>;

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector>;

    fn embed_image(&self, image: &ResolvedImage<'_>) -> Result<EmbeddingVector>;
}

#[derive(Debug, Default)]
pub struct CallCounters {
    captioner: AtomicU64,
    reasoner: AtomicU64,
    embedder: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub captioner: u64,
    pub reasoner: u64,
    pub embedder: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.captioner + self.reasoner + self.embedder
    }

    pub fn since(&self, earlier: &CallCounts) -> CallCounts {
        CallCounts {
            captioner: self.captioner - earlier.captioner,
            reasoner: self.reasoner - earlier.reasoner,
            embedder: self.embedder - earlier.embedder,
        }
    }
}

impl CallCounters {
    pub fn snapshot(&self) -> CallCounts {
        CallCounts {
            captioner: self.captioner.load(Ordering::SeqCst),
            reasoner: self.reasoner.load(Ordering::SeqCst),
            embedder: self.embedder.load(Ordering::SeqCst),
        }
    }
}

/// The three model roles bundled together, with a counter per role.
///
/// Every call made through a `ClientSet` is counted, successful or not.
#[derive(Clone)]
pub struct ClientSet {
    captioner: Arc<dyn Captioner>,
    reasoner: Arc<dyn Reasoner>,
    embedder: Arc<dyn Embedder>,
    counters: Arc<CallCounters>,
}

impl ClientSet {
    pub fn new(
        captioner: Arc<dyn Captioner>,
        reasoner: Arc<dyn Reasoner>,
        embedder: Arc<dyn Embedder>,
    ) -> Self {
        Self {
            captioner,
            reasoner,
            embedder,
            counters: Arc::default(),
        }
    }

    pub fn from_fixture(fixture: MockFixture) -> Result<Self> {
        Self::from_fixture_with_ids(fixture, &MockModelIds::default())
    }

    pub fn from_fixture_with_ids(fixture: MockFixture, ids: &MockModelIds) -> Result<Self> {
        fixture.validate()?;
        let fixture = Arc::new(fixture);
        Ok(Self::new(
            Arc::new(MockCaptioner::new(fixture.clone(), &ids.captioner_model_id)),
            Arc::new(MockReasoner::new(fixture.clone(), &ids.reasoner_model_id)),
            Arc::new(MockEmbedder::new(fixture, &ids.embedder_model_id)),
        ))
    }

    /// Same captioner and reasoner, different retrieval backend. Counters are shared.
    pub fn with_embedder(&self, embedder: Arc<dyn Embedder>) -> Self {
        Self {
            embedder,
            ..self.clone()
        }
    }

    pub fn calls(&self) -> CallCounts {
        self.counters.snapshot()
    }

    pub fn captioner_id(&self) -> &str {
        self.captioner.model_id()
    }

    pub fn reasoner_id(&self) -> &str {
        self.reasoner.model_id()
    }

    pub fn embedder_id(&self) -> &str {
        self.embedder.model_id()
    }

    pub fn caption_image(&self, image: &ResolvedImage<'_>) -> Result<String> {
        self.counters.captioner.fetch_add(1, Ordering::SeqCst);
        self.captioner.caption_image(image)
    }

    pub fn complete(&self, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidInput("prompt must be nonempty".into()));
        }
        self.counters.reasoner.fetch_add(1, Ordering::SeqCst);
        self.reasoner.complete(prompt)
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if text.trim().is_empty() {
            return Err(Error::InvalidInput("text to embed must be nonempty".into()));
        }
        self.counters.embedder.fetch_add(1, Ordering::SeqCst);
        let v = self.embedder.embed_text(text)?;
        check_advertised(self.embedder.dim(), &v)?;
        Ok(v)
    }

    pub fn embed_image(&self, image: &ResolvedImage<'_>) -> Result<EmbeddingVector> {
        self.counters.embedder.fetch_add(1, Ordering::SeqCst);
        let v = self.embedder.embed_image(image)?;
        check_advertised(self.embedder.dim(), &v)?;
        Ok(v)
    }
}

fn check_advertised(dim: Option<usize>, v: &EmbeddingVector) -> Result<()> {
    match dim {
        Some(expected) if expected != v.dim() => Err(Error::DimMismatch {
            expected,
            actual: v.dim(),
        }),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Captioner,
    Reasoner,
    Embedder,
}

fn default_timeout_ms() -> u64 {
    30_000
}
fn default_max_retries() -> u32 {
    2
}
fn default_concurrency() -> usize {
    8
}
fn default_backoff_ms() -> u64 {
    250
}

/// One HTTP model endpoint. API keys are read from the named environment
/// variable at client construction and never written anywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpointConfig {
    pub role: Role,
    pub base_url: String,
    pub model_id: String,
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Reasoner only.
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Embedder only: expected vector length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

impl ModelEndpointConfig {
    pub fn new(role: Role, base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            role,
            base_url: base_url.into(),
            model_id: model_id.into(),
            api_key_env: String::new(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            temperature: 0.0,
            max_tokens: None,
            dim: None,
            max_concurrency: default_concurrency(),
            backoff_base_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.timeout_ms == 0 {
            return Err(Error::Config(format!("{}: timeout_ms must be > 0", self.model_id)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("{}: temperature must be >= 0", self.model_id)));
        }
        if self.max_concurrency == 0 {
            return Err(Error::Config(format!("{}: max_concurrency must be >= 1", self.model_id)));
        }
        if self.base_url.is_empty() || self.model_id.is_empty() {
            return Err(Error::Config("base_url and model_id must be nonempty".into()));
        }
        Ok(())
    }

    fn expect_role(&self, role: Role) -> Result<()> {
        if self.role != role {
            return Err(Error::Config(format!(
                "endpoint `{}` has role {:?}, expected {:?}",
                self.model_id, self.role, role
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockModelIds {
    #[serde(default = "MockModelIds::captioner_default")]
    pub captioner_model_id: String,
    #[serde(default = "MockModelIds::reasoner_default")]
    pub reasoner_model_id: String,
    #[serde(default = "MockModelIds::embedder_default")]
    pub embedder_model_id: String,
}

impl MockModelIds {
    fn captioner_default() -> String {
        "mock-captioner".into()
    }
    fn reasoner_default() -> String {
        "mock-reasoner".into()
    }
    fn embedder_default() -> String {
        "mock-hash-embedder".into()
    }
}

impl Default for MockModelIds {
    fn default() -> Self {
        Self {
            captioner_model_id: Self::captioner_default(),
            reasoner_model_id: Self::reasoner_default(),
            embedder_model_id: Self::embedder_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FixtureRef {
    Path(PathBuf),
    Inline(MockFixture),
}

/// Contents of a `--clients` / `--embedder` config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ClientsConfig {
    Mock {
        fixture: FixtureRef,
        #[serde(flatten)]
        ids: MockModelIds,
    },
    Wire {
        captioner: Option<ModelEndpointConfig>,
        reasoner: Option<ModelEndpointConfig>,
        embedder: ModelEndpointConfig,
    },
}

impl ClientsConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut config: ClientsConfig =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), &e))?;
        if let ClientsConfig::Mock {
            fixture: FixtureRef::Path(p),
            ..
        } = &mut config
        {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(config)
    }

    pub fn is_mock(&self) -> bool {
        matches!(self, ClientsConfig::Mock { .. })
    }

    pub fn build(&self) -> Result<ClientSet> {
        match self {
            ClientsConfig::Mock { fixture, ids } => {
                let fixture = match fixture {
                    FixtureRef::Path(p) => MockFixture::load(p)?,
                    FixtureRef::Inline(f) => f.clone(),
                };
                ClientSet::from_fixture_with_ids(fixture, ids)
            }
            ClientsConfig::Wire {
                captioner,
                reasoner,
                embedder,
            } => {
                let captioner: Arc<dyn Captioner> = match captioner {
                    Some(c) => Arc::new(WireCaptioner::new(c.clone())?),
                    None => Arc::new(Unconfigured("captioner")),
                };
                let reasoner: Arc<dyn Reasoner> = match reasoner {
                    Some(c) => Arc::new(WireReasoner::new(c.clone())?),
                    None => Arc::new(Unconfigured("reasoner")),
                };
                Ok(ClientSet::new(
                    captioner,
                    reasoner,
                    Arc::new(WireEmbedder::new(embedder.clone())?),
                ))
            }
        }
    }
}

/// Placeholder for a role the config leaves out; every call fails.
struct Unconfigured(&'static str);

impl Unconfigured {
    fn fail<T>(&self) -> Result<T> {
        Err(Error::ClientUnavailable(format!("no {} endpoint configured", self.0)))
    }
}

impl Captioner for Unconfigured {
    fn model_id(&self) -> &str {
        "unconfigured"
    }
    fn caption_image(&self, _: &ResolvedImage<'_>) -> Result<String> {
        self.fail()
    }
}

impl Reasoner for Unconfigured {
    fn model_id(&self) -> &str {
        "unconfigured"
    }
    fn complete(&self, _: &str) -> Result<String> {
        self.fail()
    }
}

/// Counting semaphore bounding in-flight requests per endpoint.
#[derive(Debug)]
pub(crate) struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

pub(crate) struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub(crate) fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().unwrap_or_else(|e| e.into_inner());
        while *available == 0 {
            available = self.freed.wait(available).unwrap_or_else(|e| e.into_inner());
        }
        *available -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut available = self.0.available.lock().unwrap_or_else(|e| e.into_inner());
        *available += 1;
        self.0.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let cfg: ModelEndpointConfig = serde_json::from_str(
            r#"{"role":"reasoner","base_url":"http://x","model_id":"gpt"}"#,
        )
        .unwrap();
        assert_eq!(cfg.temperature, 0.0);
        assert_eq!(cfg.max_retries, 2);
        assert_eq!(cfg.max_concurrency, 8);
        assert!(cfg.validate().is_ok());
        let bad = ModelEndpointConfig {
            timeout_ms: 0,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let bad = ModelEndpointConfig {
            temperature: -0.5,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clients_config_parses_both_kinds() {
        let mock: ClientsConfig = serde_json::from_str(
            r#"{"kind":"mock","fixture":{"dim":8},"embedder_model_id":"e2"}"#,
        )
        .unwrap();
        let set = mock.build().unwrap();
        assert_eq!(set.embedder_id(), "e2");
        assert_eq!(set.captioner_id(), "mock-captioner");

        let wire: ClientsConfig = serde_json::from_str(
            r#"{"kind":"wire","embedder":{"role":"embedder","base_url":"http://127.0.0.1:9","model_id":"clip"}}"#,
        )
        .unwrap();
        let set = wire.build().unwrap();
        let img = ImageRecord::new("a", "a.jpg");
        assert!(matches!(
            set.caption_image(&ResolvedImage::remote(&img)),
            Err(Error::ClientUnavailable(_))
        ));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        use std::sync::atomic::AtomicUsize;
        let limiter = Arc::new(Limiter::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _permit = limiter.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(std::time::Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
