//! Deterministic offline model clients.
//!
//! Every mock is a pure function of its fixture and input. The embedder is a
//! bag-of-tokens hash: lowercase, split on non-alphanumeric runs, FNV-1a 64 each
//! token, add 1.0 to bucket `hash % dim`. Texts with the same token multiset get
//! the same vector.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Captioner, Embedder, Reasoner, ResolvedImage};
use crate::error::{Error, Result};
use crate::model::EmbeddingVector;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Raw token-count vector; not normalized.
pub fn hash_embed(text: &str, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; dim];
    let lower = text.to_lowercase();
    for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
        out[(fnv1a64(token.as_bytes()) % dim as u64) as usize] += 1.0;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    pub dim: usize,
    #[serde(default)]
    pub captions: BTreeMap<String, String>,
    /// Keyed by [`MockFixture::request_digest`] of the full prompt.
    #[serde(default)]
    pub replies: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_vectors: Option<BTreeMap<String, Vec<f32>>>,
    #[serde(default)]
    pub pseudo_captions: BTreeMap<String, String>,
}

impl MockFixture {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            captions: BTreeMap::new(),
            replies: BTreeMap::new(),
            text_vectors: None,
            pseudo_captions: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let fixture: MockFixture =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), &e))?;
        fixture.validate()?;
        Ok(fixture)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("mock fixture dim must be >= 2, got {}", self.dim)));
        }
        for (text, v) in self.text_vectors.iter().flatten() {
            if v.len() != self.dim {
                return Err(Error::Config(format!(
                    "text vector for `{text}` has length {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
        }
        Ok(())
    }

    pub fn request_digest(prompt: &str) -> String {
        hex::encode(Sha256::digest(prompt.as_bytes()))
    }

    pub fn with_pseudo_caption(mut self, id: &str, caption: &str) -> Self {
        self.pseudo_captions.insert(id.into(), caption.into());
        self
    }

    pub fn with_reply(mut self, prompt: &str, reply: &str) -> Self {
        self.replies.insert(Self::request_digest(prompt), reply.into());
        self
    }
}

pub struct MockCaptioner {
    fixture: Arc<MockFixture>,
    model_id: String,
}

impl MockCaptioner {
    pub fn new(fixture: Arc<MockFixture>, model_id: &str) -> Self {
        Self {
            fixture,
            model_id: model_id.into(),
        }
    }
}

impl Captioner for MockCaptioner {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn caption_image(&self, image: &ResolvedImage<'_>) -> Result<String> {
        let id = &image.record.id;
        self.fixture
            .captions
            .get(id)
            .or_else(|| self.fixture.pseudo_captions.get(id))
            .cloned()
            .ok_or_else(|| Error::EmptyModelOutput(format!("no caption for image `{id}`")))
    }
}

pub struct MockReasoner {
    fixture: Arc<MockFixture>,
    model_id: String,
}

impl MockReasoner {
    pub fn new(fixture: Arc<MockFixture>, model_id: &str) -> Self {
        Self {
            fixture,
            model_id: model_id.into(),
        }
    }
}

fn last_field<'a>(prompt: &'a str, marker: &str) -> Option<&'a str> {
    prompt
        .lines()
        .rev()
        .find_map(|line| line.strip_prefix(marker))
        .map(str::trim)
}

impl Reasoner for MockReasoner {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    /// Fixture reply for this exact prompt, else `Edited Description: {caption}, {instruction}`.
    fn complete(&self, prompt: &str) -> Result<String> {
        if let Some(reply) = self.fixture.replies.get(&MockFixture::request_digest(prompt)) {
            return Ok(reply.clone());
        }
        let caption = last_field(prompt, "Image Content:");
        let instruction = last_field(prompt, "Instruction:");
        match (caption, instruction) {
            (Some(c), Some(t)) => Ok(format!("Edited Description: {c}, {t}")),
            _ => Err(Error::EmptyModelOutput(
                "prompt has no Image Content/Instruction fields to echo".into(),
            )),
        }
    }
}

pub struct MockEmbedder {
    fixture: Arc<MockFixture>,
    model_id: String,
}

impl MockEmbedder {
    pub fn new(fixture: Arc<MockFixture>, model_id: &str) -> Self {
        Self {
            fixture,
            model_id: model_id.into(),
        }
    }
}

impl Embedder for MockEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn dim(&self) -> Option<usize> {
        Some(self.fixture.dim)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        if let Some(v) = self.fixture.text_vectors.as_ref().and_then(|m| m.get(text)) {
            return EmbeddingVector::new(v.clone());
        }
        EmbeddingVector::new(hash_embed(text, self.fixture.dim))
    }

    fn embed_image(&self, image: &ResolvedImage<'_>) -> Result<EmbeddingVector> {
        let id = &image.record.id;
        let caption = self
            .fixture
            .pseudo_captions
            .get(id)
            .ok_or_else(|| Error::EmptyModelOutput(format!("no pseudo caption for image `{id}`")))?;
        self.embed_text(caption)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::ClientSet;
    use crate::model::{cosine, ImageRecord};

    /// Independent oracle: token-overlap cosine computed from bucket counts.
    fn overlap_cosine(a: &str, b: &str, dim: u64) -> f64 {
        let buckets = |s: &str| {
            let mut m = BTreeMap::<u64, f64>::new();
            for t in s.to_lowercase().split(|c: char| !c.is_ascii_alphanumeric()) {
                if t.is_empty() {
                    continue;
                }
                let mut h: u64 = 14695981039346656037;
                for b in t.bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(1099511628211);
                }
                *m.entry(h % dim).or_default() += 1.0;
            }
            m
        };
        let (ma, mb) = (buckets(a), buckets(b));
        let shared: f64 = ma.iter().map(|(k, x)| x * mb.get(k).copied().unwrap_or(0.0)).sum();
        let na: f64 = ma.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = mb.values().map(|x| x * x).sum::<f64>().sqrt();
        shared / (na * nb)
    }

    fn fixture() -> MockFixture {
        let mut f = MockFixture::new(64).with_pseudo_caption("img1", "a dog on grass");
        f.captions.insert("img9".into(), "a red car".into());
        f
    }

    #[test]
    fn fnv_reference_values() {
        // FNV-1a 64 published test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn hash_embed_counts_tokens() {
        let v = hash_embed("Night-time, NIGHT time!", 64);
        assert_eq!(v.iter().sum::<f32>(), 4.0);
        assert_eq!(hash_embed("time night night time", 64), v);
        assert_eq!(hash_embed("???", 8), vec![0.0; 8]);
    }

    #[test]
    fn captioner_lookup_order() {
        let set = ClientSet::from_fixture(fixture()).unwrap();
        let img1 = ImageRecord::new("img1", "img1.jpg");
        let img9 = ImageRecord::new("img9", "img9.jpg");
        let unknown = ImageRecord::new("nope", "nope.jpg");
        assert_eq!(set.caption_image(&ResolvedImage::remote(&img1)).unwrap(), "a dog on grass");
        assert_eq!(set.caption_image(&ResolvedImage::remote(&img9)).unwrap(), "a red car");
        assert!(matches!(
            set.caption_image(&ResolvedImage::remote(&unknown)),
            Err(Error::EmptyModelOutput(_))
        ));
    }

    #[test]
    fn reasoner_fixture_then_fallback() {
        let prompt = "base\nImage Content: a dog on grass\nInstruction: make it night-time";
        let f = fixture().with_reply(prompt, "Edited Description: a dog on grass at night");
        let set = ClientSet::from_fixture(f).unwrap();
        assert_eq!(set.complete(prompt).unwrap(), "Edited Description: a dog on grass at night");
        let other = "base\nImage Content: a cat indoors\nInstruction: make it night-time";
        assert_eq!(
            set.complete(other).unwrap(),
            "Edited Description: a cat indoors, make it night-time"
        );
        assert!(set.complete("").is_err());
    }

    #[test]
    fn embedder_determinism_and_overlap() {
        let set = ClientSet::from_fixture(fixture()).unwrap();
        let a = set.embed_text("a dog").unwrap();
        assert_eq!(a, set.embed_text("a dog").unwrap());
        assert!((cosine(&a, &a).unwrap() - 1.0).abs() < 1e-12);

        let base = set.embed_text("a dog on grass").unwrap();
        let night = set.embed_text("a dog on grass at night").unwrap();
        let cats = set.embed_text("two cats indoors").unwrap();
        let near = cosine(&base, &night).unwrap();
        let far = cosine(&base, &cats).unwrap();
        assert!((near - overlap_cosine("a dog on grass", "a dog on grass at night", 64)).abs() < 1e-6);
        assert!((far - overlap_cosine("a dog on grass", "two cats indoors", 64)).abs() < 1e-6);
        assert!(near > far);
    }

    #[test]
    fn text_vector_override_wins() {
        let mut f = fixture();
        let mut tv = BTreeMap::new();
        let mut pinned = vec![0.0; 64];
        pinned[0] = 1.0;
        tv.insert("a dog".to_string(), pinned.clone());
        f.text_vectors = Some(tv);
        let set = ClientSet::from_fixture(f).unwrap();
        assert_eq!(set.embed_text("a dog").unwrap().values(), &pinned[..]);
        assert_ne!(set.embed_text("a cat").unwrap().values(), &pinned[..]);
    }

    #[test]
    fn image_embedding_uses_pseudo_caption() {
        let set = ClientSet::from_fixture(fixture()).unwrap();
        let img1 = ImageRecord::new("img1", "img1.jpg");
        assert_eq!(
            set.embed_image(&ResolvedImage::remote(&img1)).unwrap(),
            set.embed_text("a dog on grass").unwrap()
        );
        let unknown = ImageRecord::new("zz", "zz.jpg");
        assert!(matches!(
            set.embed_image(&ResolvedImage::remote(&unknown)),
            Err(Error::EmptyModelOutput(_))
        ));
        let calls = set.calls();
        assert_eq!((calls.captioner, calls.reasoner, calls.embedder), (0, 0, 3));
    }

    #[test]
    fn fixture_validation() {
        assert!(MockFixture::new(1).validate().is_err());
        let mut f = MockFixture::new(4);
        f.text_vectors = Some([("x".to_string(), vec![1.0, 2.0])].into());
        assert!(f.validate().is_err());
    }
}
