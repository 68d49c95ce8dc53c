//! Interactive sessions: submit a query, then edit its intermediate results.
//!
//! Each query carries a revision number. An edit names the revision it was
//! made against and is rejected if another edit got there first.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{CompositionalQuery, PipelineTrace, Stage, TaskKind};
use crate::pipeline::{Overrides, Pipeline, RunConfig, StageError};
use crate::storage::atomic_write;

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("stale revision: expected {expected}, current is {current}")]
    Conflict { expected: u64, current: u64 },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Upstream(StageError),
}

impl From<StageError> for SessionError {
    fn from(e: StageError) -> Self {
        match (&e.stage, &e.source) {
            (Stage::Validate, Error::UnknownId(id)) => SessionError::NotFound(format!("image {id}")),
            (Stage::Validate, Error::Integrity { ids }) => {
                SessionError::NotFound(format!("images {}", ids.join(", ")))
            }
            (Stage::Validate, other) => SessionError::Invalid(other.to_string()),
            _ => SessionError::Upstream(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewQuery {
    pub reference_image_id: String,
    #[serde(default)]
    pub instruction: String,
    #[serde(default)]
    pub task: Option<TaskKind>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub domain_word: Option<String>,
    /// When absent, taken from a dataset query with the same reference and instruction.
    #[serde(default)]
    pub positives: Option<Vec<String>>,
    #[serde(default)]
    pub subset_ids: Option<Vec<String>>,
}

/// An edit. An empty string clears that override.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRequest {
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub target_caption: Option<String>,
    #[serde(default)]
    pub instruction: Option<String>,
    #[serde(default)]
    pub expected_revision: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub revision: u64,
    pub overrides: Overrides,
    pub caption: Option<String>,
    pub target_caption: Option<String>,
    pub top_k_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub session_id: String,
    pub query_id: String,
    pub revision: u64,
    pub overrides: Overrides,
    pub trace: PipelineTrace,
}

/// What gets written on shutdown, one per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub session_id: String,
    pub query_id: String,
    pub config: RunConfig,
    pub query: CompositionalQuery,
    pub revision: u64,
    pub overrides: Overrides,
    pub trace: PipelineTrace,
    pub history: Vec<HistoryEntry>,
}

struct QueryState {
    query: CompositionalQuery,
    config: RunConfig,
    overrides: Overrides,
    revision: u64,
    trace: PipelineTrace,
    history: Vec<HistoryEntry>,
}

impl QueryState {
    fn record_history(&mut self) {
        self.history.push(HistoryEntry {
            revision: self.revision,
            overrides: self.overrides.clone(),
            caption: self.trace.caption.as_ref().map(|c| c.text.clone()),
            target_caption: self.trace.target_caption.as_ref().map(|t| t.text.clone()),
            top_k_ids: self.trace.ranking.ids(),
        });
    }

    fn view(&self, session_id: &str) -> QueryView {
        QueryView {
            session_id: session_id.to_string(),
            query_id: self.query.id.clone(),
            revision: self.revision,
            overrides: self.overrides.clone(),
            trace: self.trace.clone(),
        }
    }
}

struct Session {
    config: RunConfig,
    queries: RwLock<HashMap<String, Arc<Mutex<QueryState>>>>,
    next_query: AtomicU64,
}

/// All sessions over one pipeline. Calls block while models run.
pub struct SessionStore {
    pipeline: Arc<Pipeline>,
    known_queries: Vec<CompositionalQuery>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    next_session: AtomicU64,
}

impl SessionStore {
    pub fn new(pipeline: Arc<Pipeline>) -> Self {
        Self {
            pipeline,
            known_queries: Vec::new(),
            sessions: RwLock::default(),
            next_session: AtomicU64::new(1),
        }
    }

    /// Dataset queries used to fill in positives for submitted queries.
    pub fn with_known_queries(mut self, queries: Vec<CompositionalQuery>) -> Self {
        self.known_queries = queries;
        self
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    pub fn create_session(&self, config: RunConfig) -> Result<String, SessionError> {
        config.validate().map_err(|e| SessionError::Invalid(e.to_string()))?;
        let id = format!("s{}", self.next_session.fetch_add(1, Ordering::SeqCst));
        let session = Session {
            config,
            queries: RwLock::default(),
            next_query: AtomicU64::new(1),
        };
        self.sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.clone(), Arc::new(session));
        Ok(id)
    }

    fn session(&self, sid: &str) -> Result<Arc<Session>, SessionError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(sid)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(format!("session {sid}")))
    }

    fn query_state(&self, sid: &str, qid: &str) -> Result<Arc<Mutex<QueryState>>, SessionError> {
        self.session(sid)?
            .queries
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(qid)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(format!("query {qid} in session {sid}")))
    }

    pub fn submit(&self, sid: &str, new: NewQuery) -> Result<QueryView, SessionError> {
        let session = self.session(sid)?;
        if !self.pipeline.gallery().contains(&new.reference_image_id) {
            return Err(SessionError::NotFound(format!("image {}", new.reference_image_id)));
        }
        let mut config = session.config.clone();
        if let Some(k) = new.k {
            if k == 0 {
                return Err(SessionError::Invalid("k must be at least 1".into()));
            }
            config.k = k;
        }
        let task = new.task.or(config.task).unwrap_or(TaskKind::Cir);
        if new.instruction.trim().is_empty() && task != TaskKind::DomainConversion {
            return Err(SessionError::Invalid("instruction must be nonempty".into()));
        }
        let positives = new.positives.clone().unwrap_or_else(|| {
            self.known_queries
                .iter()
                .find(|q| q.reference_image_id == new.reference_image_id && q.instruction == new.instruction)
                .map(|q| q.positives.clone())
                .unwrap_or_default()
        });
        let qid = format!("q{}", session.next_query.fetch_add(1, Ordering::SeqCst));
        let query = CompositionalQuery {
            id: qid.clone(),
            reference_image_id: new.reference_image_id,
            instruction: new.instruction,
            task,
            subset_ids: new.subset_ids,
            positives,
            domain_word: new.domain_word,
        };
        config.task = Some(task);
        let trace = self.pipeline.run_query(&query, &config, &Overrides::default())?;
        let mut state = QueryState {
            query,
            config,
            overrides: Overrides::default(),
            revision: 1,
            trace,
            history: Vec::new(),
        };
        state.record_history();
        let view = state.view(sid);
        session
            .queries
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(qid, Arc::new(Mutex::new(state)));
        Ok(view)
    }

    pub fn get(&self, sid: &str, qid: &str) -> Result<QueryView, SessionError> {
        let state = self.query_state(sid, qid)?;
        let state = state.lock().unwrap_or_else(|e| e.into_inner());
        Ok(state.view(sid))
    }

    pub fn history(&self, sid: &str, qid: &str) -> Result<Vec<HistoryEntry>, SessionError> {
        let state = self.query_state(sid, qid)?;
        let state = state.lock().unwrap_or_else(|e| e.into_inner());
        Ok(state.history.clone())
    }

    /// Applies an edit and reruns the stages it affects.
    ///
    /// A caption or instruction edit drops any stored target-caption override,
    /// since that text was written against the old upstream state.
    pub fn patch(&self, sid: &str, qid: &str, patch: PatchRequest) -> Result<QueryView, SessionError> {
        let expected = patch
            .expected_revision
            .ok_or_else(|| SessionError::Invalid("expected_revision is required".into()))?;
        if patch.caption.is_none() && patch.target_caption.is_none() && patch.instruction.is_none() {
            return Err(SessionError::Invalid("nothing to change".into()));
        }
        let state = self.query_state(sid, qid)?;
        let mut state = state.lock().unwrap_or_else(|e| e.into_inner());
        if state.revision != expected {
            return Err(SessionError::Conflict {
                expected,
                current: state.revision,
            });
        }

        let mut merged = state.overrides.clone();
        let mut from = Stage::Retrieve;
        let set = |slot: &mut Option<String>, value: &str| {
            *slot = Some(value.to_string()).filter(|v| !v.trim().is_empty());
        };
        if let Some(caption) = &patch.caption {
            set(&mut merged.caption, caption);
            merged.target_caption = None;
            from = Stage::Caption;
        }
        if let Some(instruction) = &patch.instruction {
            set(&mut merged.instruction, instruction);
            merged.target_caption = None;
            from = earlier(from, Stage::Reason);
        }
        if let Some(target) = &patch.target_caption {
            set(&mut merged.target_caption, target);
            let stage = if merged.target_caption.is_some() { Stage::Embed } else { Stage::Reason };
            from = earlier(from, stage);
        }

        let trace = self
            .pipeline
            .rerun(&state.query, &state.config, &merged, Some(&state.trace), from)?;
        state.trace = trace;
        state.overrides = merged;
        state.revision += 1;
        state.record_history();
        Ok(state.view(sid))
    }

    pub fn export(&self) -> Vec<QueryRecord> {
        let sessions = self.sessions.read().unwrap_or_else(|e| e.into_inner());
        let mut out = Vec::new();
        for (sid, session) in sessions.iter() {
            for state in session.queries.read().unwrap_or_else(|e| e.into_inner()).values() {
                let s = state.lock().unwrap_or_else(|e| e.into_inner());
                out.push(QueryRecord {
                    session_id: sid.clone(),
                    query_id: s.query.id.clone(),
                    config: s.config.clone(),
                    query: s.query.clone(),
                    revision: s.revision,
                    overrides: s.overrides.clone(),
                    trace: s.trace.clone(),
                    history: s.history.clone(),
                });
            }
        }
        out.sort_by(|a, b| (&a.session_id, &a.query_id).cmp(&(&b.session_id, &b.query_id)));
        out
    }

    /// Writes [`Self::export`] as JSONL.
    pub fn persist(&self, path: &Path) -> crate::error::Result<usize> {
        let records = self.export();
        let mut out = String::new();
        for r in &records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        atomic_write(path, out.as_bytes())?;
        Ok(records.len())
    }
}

fn earlier(a: Stage, b: Stage) -> Stage {
    let pos = |s: Stage| Stage::ALL.iter().position(|&x| x == s).unwrap_or(0);
    if pos(a) <= pos(b) {
        a
    } else {
        b
    }
}
