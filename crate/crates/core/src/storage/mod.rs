//! Persistence: datasets, embedding files, the model-output cache, results.
//!
//! Every format is UTF-8 JSON or JSONL. Whole-file writes go through
//! [`atomic_write`], so readers never observe a half-written file.

mod cache;
mod dataset;
mod embeddings;
mod results;

use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub use cache::{cache_key, CacheKind, CacheStats, CacheValue, CacheEntry, ImageKeying, ModelCache};
pub use dataset::{load_dataset, AdapterMapping, CanonicalDataset, Gallery, ImagesMapping, QueriesMapping};
pub use embeddings::{read_embeddings, write_embeddings};
pub use results::{read_results, traces_to_eval_records, write_results, ResultsReader};

/// Writes `bytes` to a temp file beside `path`, syncs it, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
