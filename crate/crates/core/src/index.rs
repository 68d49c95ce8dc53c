//! Exact cosine top-k search over an embedded gallery.
//!
//! Vectors are normalized once at build time. Each row's norm after rounding
//! to f32 is kept too, so a score is the dot product divided by both norms. Entries are kept
//! sorted by id in one contiguous buffer; that ordering doubles as the
//! tie-break rule (equal scores rank by ascending id).

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::model::{check_dims, EmbeddingVector, ScoredImage, MIN_NORM};

#[derive(Debug, Clone)]
pub struct GalleryIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
    row_norms: Vec<f64>,
    positions: HashMap<String, usize>,
    insertion_count: usize,
    backend_model_id: String,
}

impl GalleryIndex {
    /// Builds an immutable index. Every vector is L2-normalized on the way in.
    pub fn build<I, S>(items: I, backend_model_id: impl Into<String>) -> Result<Self>
    where
        I: IntoIterator<Item = (S, EmbeddingVector)>,
        S: Into<String>,
    {
        let mut staged: Vec<(String, EmbeddingVector)> = Vec::new();
        let mut seen = HashSet::new();
        let mut dim = None;
        for (id, vector) in items {
            let id = id.into();
            if id.is_empty() {
                return Err(Error::InvalidInput("image id must be nonempty".into()));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            let expected = *dim.get_or_insert(vector.dim());
            check_dims(expected, vector.dim())?;
            staged.push((id, vector.normalize()?));
        }
        let dim = dim.ok_or(Error::EmptyGallery)?;
        let insertion_count = staged.len();
        staged.sort_by(|a, b| a.0.cmp(&b.0));

        let mut ids = Vec::with_capacity(staged.len());
        let mut rows = Vec::with_capacity(staged.len() * dim);
        let mut row_norms = Vec::with_capacity(staged.len());
        for (id, vector) in staged {
            ids.push(id);
            row_norms.push(vector.norm());
            rows.extend_from_slice(vector.values());
        }
        let positions = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Ok(Self {
            dim,
            ids,
            rows,
            row_norms,
            positions,
            insertion_count,
            backend_model_id: backend_model_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn insertion_count(&self) -> usize {
        self.insertion_count
    }

    pub fn backend_model_id(&self) -> &str {
        &self.backend_model_id
    }

    pub fn contains(&self, id: &str) -> bool {
        self.positions.contains_key(id)
    }

    /// Ids in ascending order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// The stored (unit-norm) vector for `id`.
    pub fn get(&self, id: &str) -> Option<EmbeddingVector> {
        let &pos = self.positions.get(id)?;
        EmbeddingVector::new(self.row(pos).to_vec()).ok()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[f32])> + '_ {
        self.ids
            .iter()
            .enumerate()
            .map(move |(i, id)| (id.as_str(), self.row(i)))
    }

    fn row(&self, pos: usize) -> &[f32] {
        &self.rows[pos * self.dim..(pos + 1) * self.dim]
    }

    fn prepare_query(&self, query: &EmbeddingVector) -> Result<f64> {
        check_dims(self.dim, query.dim())?;
        let norm = query.norm();
        if !(norm > MIN_NORM) {
            return Err(Error::DegenerateVector { norm });
        }
        Ok(norm)
    }

    fn score(&self, query: &[f32], query_norm: f64, pos: usize) -> f64 {
        dot_unrolled(query, self.row(pos)) / (query_norm * self.row_norms[pos])
    }

    /// The `k` best-scoring entries not in `exclude`, best first.
    ///
    /// Excluded ids never occupy a rank slot.
    pub fn top_k(
        &self,
        query: &EmbeddingVector,
        k: usize,
        exclude: &HashSet<String>,
    ) -> Result<Vec<ScoredImage>> {
        if k == 0 {
            return Err(Error::InvalidK(k));
        }
        let query_norm = self.prepare_query(query)?;
        let q = query.values();
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&pos| !exclude.contains(&self.ids[pos]))
            .map(|pos| (pos, self.score(q, query_norm, pos)))
            .collect();
        if scored.is_empty() {
            return Err(Error::EmptyGallery);
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank_order);
        Ok(self.materialize(scored))
    }

    /// Ranks exactly `member_ids`, with the same scores and tie rule as [`Self::top_k`].
    pub fn rank_subset(
        &self,
        query: &EmbeddingVector,
        member_ids: &[String],
    ) -> Result<Vec<ScoredImage>> {
        let query_norm = self.prepare_query(query)?;
        let q = query.values();
        let mut seen = HashSet::with_capacity(member_ids.len());
        let mut scored = Vec::with_capacity(member_ids.len());
        for id in member_ids {
            let &pos = self
                .positions
                .get(id)
                .ok_or_else(|| Error::UnknownId(id.clone()))?;
            if !seen.insert(pos) {
                return Err(Error::DuplicateId(id.clone()));
            }
            scored.push((pos, self.score(q, query_norm, pos)));
        }
        if scored.is_empty() {
            return Err(Error::EmptyGallery);
        }
        scored.sort_unstable_by(rank_order);
        Ok(self.materialize(scored))
    }

    fn materialize(&self, scored: Vec<(usize, f64)>) -> Vec<ScoredImage> {
        scored
            .into_iter()
            .map(|(pos, score)| ScoredImage {
                image_id: self.ids[pos].clone(),
                score,
            })
            .collect()
    }
}

// Positions follow ascending id order, so comparing positions breaks ties by id.
fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn dot_unrolled(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let tail: f64 = chunks_a
        .remainder()
        .iter()
        .zip(chunks_b.remainder())
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for lane in 0..4 {
            acc[lane] += f64::from(ca[lane]) * f64::from(cb[lane]);
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
