use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::atomic_write;
use crate::error::{Error, Result};
use crate::model::EmbeddingVector;

#[derive(Serialize, Deserialize)]
struct EmbeddingLine {
    id: String,
    dim: usize,
    values: Vec<f32>,
}

/// Writes one `{"id", "dim", "values"}` object per line, sorted by id.
pub fn write_embeddings(path: &Path, items: &[(String, EmbeddingVector)]) -> Result<()> {
    let mut sorted: Vec<&(String, EmbeddingVector)> = items.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::new();
    for (id, v) in sorted {
        let line = EmbeddingLine {
            id: id.clone(),
            dim: v.dim(),
            values: v.values().to_vec(),
        };
        out.push_str(&serde_json::to_string(&line).expect("embedding lines serialize"));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<(String, EmbeddingVector)>> {
    let text = fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    let mut dim = None;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: EmbeddingLine =
            serde_json::from_str(line).map_err(|e| Error::parse_at_line(&name, n + 1, &e))?;
        if parsed.dim != parsed.values.len() {
            return Err(Error::Parse {
                source_name: name,
                line: n + 1,
                column: 0,
                message: format!("dim {} but {} values", parsed.dim, parsed.values.len()),
            });
        }
        let expected = *dim.get_or_insert(parsed.dim);
        if expected != parsed.dim {
            return Err(Error::DimMismatch {
                expected,
                actual: parsed.dim,
            });
        }
        out.push((parsed.id, EmbeddingVector::new(parsed.values)?));
    }
    Ok(out)
}
