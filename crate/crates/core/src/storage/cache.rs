use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::error::Result;

const SEPARATOR: u8 = 0x1F;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheKind {
    Caption,
    TargetCaption,
    TextEmbedding,
    ImageEmbedding,
}

impl CacheKind {
    pub const ALL: [CacheKind; 4] = [
        CacheKind::Caption,
        CacheKind::TargetCaption,
        CacheKind::TextEmbedding,
        CacheKind::ImageEmbedding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CacheKind::Caption => "caption",
            CacheKind::TargetCaption => "target_caption",
            CacheKind::TextEmbedding => "text_embedding",
            CacheKind::ImageEmbedding => "image_embedding",
        }
    }

    fn file_name(self) -> String {
        format!("{}.jsonl", self.as_str())
    }

    fn holds_vectors(self) -> bool {
        matches!(self, CacheKind::TextEmbedding | CacheKind::ImageEmbedding)
    }
}

/// SHA-256 hex of `kind ‖ 0x1F ‖ model_id ‖ 0x1F ‖ input`.
pub fn cache_key(kind: CacheKind, model_id: &str, input: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_str().as_bytes());
    h.update([SEPARATOR]);
    h.update(model_id.as_bytes());
    h.update([SEPARATOR]);
    h.update(input);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CacheValue {
    Text(String),
    Vector(Vec<f32>),
}

impl CacheValue {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            CacheValue::Text(s) => Some(s),
            CacheValue::Vector(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&[f32]> {
        match self {
            CacheValue::Vector(v) => Some(v),
            CacheValue::Text(_) => None,
        }
    }

    fn matches(&self, kind: CacheKind) -> bool {
        matches!(self, CacheValue::Vector(_)) == kind.holds_vectors()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub kind: CacheKind,
    pub model_id: String,
    pub input_digest: String,
    pub value: CacheValue,
    pub created_at: DateTime<Utc>,
}

/// What identifies an image for caching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageKeying {
    /// File bytes for readable local files, otherwise the uri string.
    #[default]
    Auto,
    /// Always the uri string.
    Uri,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
}

/// Content-addressed store of model outputs.
///
/// Backed by one append-only JSONL file per kind, indexed in memory. Reads
/// take a shared lock; appends are serialized. On load, later lines win and
/// corrupt lines are skipped with a warning.
#[derive(Debug)]
pub struct ModelCache {
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<String, CacheValue>>,
    writers: Mutex<HashMap<CacheKind, File>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ModelCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            entries: RwLock::default(),
            writers: Mutex::default(),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut entries = HashMap::new();
        for kind in CacheKind::ALL {
            let path = dir.join(kind.file_name());
            if !path.exists() {
                continue;
            }
            let reader = BufReader::new(File::open(&path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(&line) {
                    Ok(entry) if entry.kind == kind && entry.value.matches(kind) => {
                        entries.insert(entry.key, entry.value);
                    }
                    Ok(_) => warn!(file = %path.display(), line = n + 1, "cache entry of wrong kind skipped"),
                    Err(e) => warn!(file = %path.display(), line = n + 1, "corrupt cache line skipped: {e}"),
                }
            }
        }
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            entries: RwLock::new(entries),
            ..Self::in_memory()
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
        }
    }

    pub fn get(&self, kind: CacheKind, model_id: &str, input: &[u8]) -> Option<CacheValue> {
        let key = cache_key(kind, model_id, input);
        let found = self
            .entries
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(&key)
            .cloned();
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::SeqCst);
        found
    }

    pub fn put(&self, kind: CacheKind, model_id: &str, input: &[u8], value: CacheValue) -> Result<()> {
        if !value.matches(kind) {
            return Err(crate::error::Error::InvalidInput(format!(
                "cache value type does not match kind {}",
                kind.as_str()
            )));
        }
        let entry = CacheEntry {
            key: cache_key(kind, model_id, input),
            kind,
            model_id: model_id.to_string(),
            input_digest: hex::encode(Sha256::digest(input)),
            value,
            created_at: Utc::now(),
        };
        if let Some(dir) = &self.dir {
            let mut line = serde_json::to_string(&entry).expect("cache entries serialize");
            line.push('\n');
            let mut writers = self.writers.lock().unwrap_or_else(|e| e.into_inner());
            let file = match writers.entry(kind) {
                std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
                std::collections::hash_map::Entry::Vacant(v) => v.insert(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(dir.join(kind.file_name()))?,
                ),
            };
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.entries
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(entry.key, entry.value);
        Ok(())
    }
}
