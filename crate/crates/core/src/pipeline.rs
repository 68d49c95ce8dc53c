//! Caption, reason, retrieve.
//!
//! [`Pipeline`] runs one query at a time through the three stages and records
//! everything it did in a [`PipelineTrace`]. Every model call goes through the
//! cache when one is attached.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::clients::{CallCounts, ClientSet, ResolvedImage};
use crate::error::{Error, Result};
use crate::index::GalleryIndex;
use crate::model::{
    CaptionRecord, CaptionSource, CompositionalQuery, EmbeddingVector, PipelineTrace, QueryMode,
    RankedResult, Stage, StageFailure, TargetCaption, TargetSource, TaskKind,
};
use crate::prompt::{
    build_reasoner_request, parse_edited_description, template_target, PromptTemplate,
    TargetTemplate, TemplateStore,
};
use crate::storage::{CacheKind, CacheValue, Gallery, ImageKeying, ModelCache};

pub const DEFAULT_PARALLELISM: usize = 4;

/// Sum norm below which image-plus-text composition is rejected.
pub const MIN_COMPOSED_NORM: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: QueryMode,
    /// Replaces each query's own task when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskKind>,
    pub k: usize,
    /// Unset falls back to the dataset flag, then to the task default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclude_reference: Option<bool>,
    /// Unset picks the task's default template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
    #[serde(default = "default_true")]
    pub cache_enabled: bool,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_true() -> bool {
    true
}

fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}

impl RunConfig {
    pub fn new(mode: QueryMode, k: usize) -> Self {
        Self {
            mode,
            task: None,
            k,
            exclude_reference: None,
            template_id: None,
            cache_enabled: true,
            parallelism: DEFAULT_PARALLELISM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidK(0));
        }
        if self.parallelism == 0 {
            return Err(Error::Config("parallelism must be at least 1".into()));
        }
        Ok(())
    }
}

/// Human edits to intermediate results. A target caption wins over everything
/// upstream of it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruction: Option<String>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        self.caption.is_none() && self.target_caption.is_none() && self.instruction.is_none()
    }

    /// Earliest stage an edit touches, if any.
    pub fn earliest_stage(&self) -> Option<Stage> {
        if self.caption.is_some() {
            Some(Stage::Caption)
        } else if self.instruction.is_some() {
            Some(Stage::Reason)
        } else if self.target_caption.is_some() {
            Some(Stage::Embed)
        } else {
            None
        }
    }
}

/// Source of timestamps and stage durations.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
    fn elapsed_ms(&self, since: Instant) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }

    fn elapsed_ms(&self, since: Instant) -> u64 {
        since.elapsed().as_millis() as u64
    }
}

/// Always the epoch, every stage takes 0 ms. Makes mock runs byte-reproducible.
#[derive(Debug, Clone, Copy, Default)]
pub struct FrozenClock;

impl Clock for FrozenClock {
    fn now(&self) -> DateTime<Utc> {
        DateTime::<Utc>::UNIX_EPOCH
    }

    fn elapsed_ms(&self, _: Instant) -> u64 {
        0
    }
}

/// A pipeline error tagged with the stage that produced it.
#[derive(Debug, thiserror::Error)]
#[error("{stage} stage failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

impl StageError {
    fn new(stage: Stage, source: Error) -> Self {
        Self { stage, source }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub queries: usize,
    pub ok: usize,
    pub failed: usize,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub client_calls: CallCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRun {
    pub traces: Vec<PipelineTrace>,
    pub summary: RunSummary,
}

/// Model calls routed through the cache.
pub struct CachedCalls<'a> {
    pub clients: &'a ClientSet,
    pub cache: Option<&'a ModelCache>,
    pub gallery: &'a Gallery,
    pub keying: ImageKeying,
}

impl<'a> CachedCalls<'a> {
    fn resolve(&self, image_id: &str) -> Result<(ResolvedImage<'a>, Vec<u8>)> {
        let record = self
            .gallery
            .get(image_id)
            .ok_or_else(|| Error::UnknownId(image_id.to_string()))?;
        let bytes = self.gallery.read_local(record).map(Arc::new);
        let key = match (&bytes, self.keying) {
            (Some(b), ImageKeying::Auto) => b.as_ref().clone(),
            _ => record.uri.as_bytes().to_vec(),
        };
        Ok((ResolvedImage { record, bytes }, key))
    }

    fn text(
        &self,
        kind: CacheKind,
        model_id: &str,
        input: &[u8],
        compute: impl FnOnce() -> Result<String>,
    ) -> Result<String> {
        if let Some(CacheValue::Text(t)) = self.cache.and_then(|c| c.get(kind, model_id, input)) {
            return Ok(t);
        }
        let value = compute()?;
        self.store(kind, model_id, input, CacheValue::Text(value.clone()));
        Ok(value)
    }

    fn vector(
        &self,
        kind: CacheKind,
        model_id: &str,
        input: &[u8],
        compute: impl FnOnce() -> Result<EmbeddingVector>,
    ) -> Result<EmbeddingVector> {
        if let Some(CacheValue::Vector(v)) = self.cache.and_then(|c| c.get(kind, model_id, input)) {
            match EmbeddingVector::new(v) {
                Ok(v) => return Ok(v),
                Err(e) => warn!("ignoring unusable cached vector: {e}"),
            }
        }
        let value = compute()?;
        self.store(kind, model_id, input, CacheValue::Vector(value.values().to_vec()));
        Ok(value)
    }

    fn store(&self, kind: CacheKind, model_id: &str, input: &[u8], value: CacheValue) {
        if let Some(cache) = self.cache {
            if let Err(e) = cache.put(kind, model_id, input, value) {
                warn!("cache write failed: {e}");
            }
        }
    }

    pub fn caption(&self, image_id: &str) -> Result<String> {
        let (image, key) = self.resolve(image_id)?;
        self.text(CacheKind::Caption, self.clients.captioner_id(), &key, || {
            self.clients.caption_image(&image)
        })
    }

    /// Raw reasoner reply for a full request.
    pub fn reason(&self, request: &str) -> Result<String> {
        self.text(
            CacheKind::TargetCaption,
            self.clients.reasoner_id(),
            request.as_bytes(),
            || self.clients.complete(request),
        )
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector> {
        self.vector(
            CacheKind::TextEmbedding,
            self.clients.embedder_id(),
            text.as_bytes(),
            || self.clients.embed_text(text),
        )
    }

    pub fn embed_image(&self, image_id: &str) -> Result<EmbeddingVector> {
        let (image, key) = self.resolve(image_id)?;
        self.vector(CacheKind::ImageEmbedding, self.clients.embedder_id(), &key, || {
            self.clients.embed_image(&image)
        })
    }
}

/// Embeds every gallery image, sorted by id. The first failure aborts.
pub fn embed_gallery(calls: &CachedCalls<'_>, width: usize) -> Result<Vec<(String, EmbeddingVector)>> {
    let mut ids: Vec<&str> = calls.gallery.records().map(|r| r.id.as_str()).collect();
    ids.sort_unstable();
    parallel_map(&ids, width, |id| calls.embed_image(id).map(|v| (id.to_string(), v)))
        .into_iter()
        .collect()
}

/// Maps `items` on up to `width` threads. Output order matches input order.
pub fn parallel_map<T, R, F>(items: &[T], width: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let width = width.clamp(1, items.len().max(1));
    if width == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..width {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let out = f(item);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .expect("every slot is filled")
        })
        .collect()
}

/// Everything needed to answer queries against one gallery.
pub struct Pipeline {
    clients: ClientSet,
    gallery: Gallery,
    index: Arc<GalleryIndex>,
    cache: Option<Arc<ModelCache>>,
    templates: Arc<TemplateStore>,
    clock: Arc<dyn Clock>,
    keying: ImageKeying,
    dataset_exclude_reference: Option<bool>,
}

impl Pipeline {
    pub fn new(clients: ClientSet, gallery: Gallery, index: Arc<GalleryIndex>) -> Self {
        Self {
            clients,
            gallery,
            index,
            cache: None,
            templates: Arc::new(TemplateStore::builtin()),
            clock: Arc::new(SystemClock),
            keying: ImageKeying::default(),
            dataset_exclude_reference: None,
        }
    }

    pub fn with_cache(mut self, cache: Arc<ModelCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_templates(mut self, templates: Arc<TemplateStore>) -> Self {
        self.templates = templates;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_image_keying(mut self, keying: ImageKeying) -> Self {
        self.keying = keying;
        self
    }

    pub fn with_dataset_exclude_reference(mut self, flag: Option<bool>) -> Self {
        self.dataset_exclude_reference = flag;
        self
    }

    pub fn clients(&self) -> &ClientSet {
        &self.clients
    }

    pub fn gallery(&self) -> &Gallery {
        &self.gallery
    }

    pub fn index(&self) -> &GalleryIndex {
        &self.index
    }

    pub fn cache(&self) -> Option<&ModelCache> {
        self.cache.as_deref()
    }

    pub fn templates(&self) -> &TemplateStore {
        &self.templates
    }

    pub fn calls(&self, config: &RunConfig) -> CachedCalls<'_> {
        CachedCalls {
            clients: &self.clients,
            cache: self.cache.as_deref().filter(|_| config.cache_enabled),
            gallery: &self.gallery,
            keying: self.keying,
        }
    }

    pub fn exclude_reference(&self, config: &RunConfig, task: TaskKind) -> bool {
        config
            .exclude_reference
            .or(self.dataset_exclude_reference)
            .unwrap_or_else(|| task.default_exclude_reference())
    }

    fn template_for(&self, config: &RunConfig, task: TaskKind) -> Result<&PromptTemplate> {
        match &config.template_id {
            Some(id) => self.templates.get(id),
            None => self.templates.for_task(task),
        }
    }

    /// The vector that gets matched against the gallery.
    ///
    /// `modifier` is the modifying text used by the text-only and
    /// image-plus-text baselines.
    pub fn query_embedding(
        &self,
        config: &RunConfig,
        query: &CompositionalQuery,
        modifier: Option<&str>,
        target_caption: Option<&str>,
    ) -> Result<EmbeddingVector> {
        let calls = self.calls(config);
        let mode = config.mode;
        let missing = |input| Error::ModeInputMissing {
            mode: mode.to_string(),
            input,
        };
        let modifier = modifier.filter(|t| !t.trim().is_empty());
        match mode {
            QueryMode::ImageOnly => self.reference_embedding(&calls, query),
            QueryMode::TextOnly => calls.embed_text(modifier.ok_or_else(|| missing("modifying text"))?),
            QueryMode::ImagePlusText => {
                let text = modifier.ok_or_else(|| missing("modifying text"))?;
                let img = self.reference_embedding(&calls, query)?.normalize()?;
                let txt = calls.embed_text(text)?.normalize()?;
                compose(&img, &txt)
            }
            QueryMode::Cirevl | QueryMode::CaptionTemplate => {
                let target = target_caption
                    .filter(|t| !t.trim().is_empty())
                    .ok_or_else(|| missing("target caption"))?;
                calls.embed_text(target)
            }
        }
    }

    fn reference_embedding(&self, calls: &CachedCalls<'_>, query: &CompositionalQuery) -> Result<EmbeddingVector> {
        let id = &query.reference_image_id;
        if self.index.backend_model_id() == self.clients.embedder_id() {
            if let Some(v) = self.index.get(id) {
                return Ok(v);
            }
        }
        calls.embed_image(id)
    }

    /// Runs every stage for one query.
    pub fn run_query(
        &self,
        query: &CompositionalQuery,
        config: &RunConfig,
        overrides: &Overrides,
    ) -> std::result::Result<PipelineTrace, StageError> {
        self.rerun(query, config, overrides, None, Stage::Validate)
    }

    /// Runs stages from `from` onward, taking earlier stage outputs from `prior`.
    ///
    /// Overrides always apply. With `from` at [`Stage::Embed`] or later and no
    /// target override, the prior target caption is reused.
    pub fn rerun(
        &self,
        query: &CompositionalQuery,
        config: &RunConfig,
        overrides: &Overrides,
        prior: Option<&PipelineTrace>,
        from: Stage,
    ) -> std::result::Result<PipelineTrace, StageError> {
        let (trace, err) = self.execute(query, config, overrides, prior, from);
        match err {
            Some(e) => Err(e),
            None => Ok(trace),
        }
    }

    /// Like [`Self::run_query`], but a failure comes back as a trace whose
    /// `error` names the stage, keeping whatever earlier stages produced.
    pub fn run_query_traced(
        &self,
        query: &CompositionalQuery,
        config: &RunConfig,
        overrides: &Overrides,
    ) -> PipelineTrace {
        self.execute(query, config, overrides, None, Stage::Validate).0
    }

    fn execute(
        &self,
        query: &CompositionalQuery,
        config: &RunConfig,
        overrides: &Overrides,
        prior: Option<&PipelineTrace>,
        from: Stage,
    ) -> (PipelineTrace, Option<StageError>) {
        let task = config.task.unwrap_or(query.task);
        let instruction = overrides
            .instruction
            .clone()
            .unwrap_or_else(|| query.instruction.clone());
        let exclude = self.exclude_reference(config, task);
        let excluded_ids = if exclude {
            vec![query.reference_image_id.clone()]
        } else {
            Vec::new()
        };
        let mut trace = PipelineTrace {
            query_id: query.id.clone(),
            mode: config.mode,
            task,
            instruction: instruction.clone(),
            caption: None,
            target_caption: None,
            reasoner_raw_reply: None,
            marker_missing: false,
            ranking: RankedResult {
                query_id: query.id.clone(),
                mode: config.mode,
                ranking: Vec::new(),
                excluded_ids,
            },
            subset_ranking: None,
            positives: query.positives.clone(),
            timings: BTreeMap::new(),
            error: None,
        };
        let result = self.stages(query, config, overrides, prior, from, task, &instruction, &mut trace);
        match result {
            Ok(()) => (trace, None),
            Err(e) => {
                debug!(query = %query.id, stage = %e.stage, "query failed: {}", e.source);
                trace.error = Some(StageFailure {
                    stage: e.stage,
                    message: e.source.to_string(),
                });
                (trace, Some(e))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn stages(
        &self,
        query: &CompositionalQuery,
        config: &RunConfig,
        overrides: &Overrides,
        prior: Option<&PipelineTrace>,
        from: Stage,
        task: TaskKind,
        instruction: &str,
        trace: &mut PipelineTrace,
    ) -> std::result::Result<(), StageError> {
        let calls = self.calls(config);
        let reuse = |stage: Stage| prior.filter(|_| stage_order(from) > stage_order(stage));

        self.check_query(query, task)
            .map_err(|e| StageError::new(Stage::Validate, e))?;

        let target_override = overrides
            .target_caption
            .as_deref()
            .map(crate::model::single_line)
            .filter(|t| !t.is_empty());

        // Caption.
        let started = Instant::now();
        trace.caption = if let Some(text) = &overrides.caption {
            Some(
                CaptionRecord::new(&query.reference_image_id, text, CaptionSource::UserOverride, self.clock.now())
                    .map_err(|e| StageError::new(Stage::Caption, e))?,
            )
        } else if let Some(prev) = reuse(Stage::Caption).and_then(|p| p.caption.clone()) {
            Some(prev)
        } else if config.mode.needs_caption() && target_override.is_none() {
            let text = calls
                .caption(&query.reference_image_id)
                .map_err(|e| StageError::new(Stage::Caption, e))?;
            Some(
                CaptionRecord::new(
                    &query.reference_image_id,
                    &text,
                    CaptionSource::Model(self.clients.captioner_id().to_string()),
                    self.clock.now(),
                )
                .map_err(|e| StageError::new(Stage::Caption, e))?,
            )
        } else {
            None
        };
        if trace.caption.is_some() {
            trace.timings.insert(Stage::Caption.to_string(), self.clock.elapsed_ms(started));
        }

        // Target caption.
        let started = Instant::now();
        let reused_target = reuse(Stage::Reason).filter(|_| target_override.is_none());
        if let Some(text) = target_override {
            trace.target_caption = Some(TargetCaption {
                query_id: query.id.clone(),
                text,
                source: TargetSource::UserOverride,
            });
        } else if let Some(prev) = reused_target.filter(|p| p.target_caption.is_some()) {
            trace.target_caption = prev.target_caption.clone();
            trace.reasoner_raw_reply = prev.reasoner_raw_reply.clone();
            trace.marker_missing = prev.marker_missing;
        } else if config.mode.needs_caption() {
            let caption = trace
                .caption
                .as_ref()
                .map(|c| c.text.clone())
                .ok_or_else(|| StageError::new(Stage::Reason, Error::ModeInputMissing {
                    mode: config.mode.to_string(),
                    input: "caption",
                }))?;
            self.derive_target(query, config, task, instruction, &caption, &calls, trace)
                .map_err(|e| StageError::new(Stage::Reason, e))?;
            trace.timings.insert(Stage::Reason.to_string(), self.clock.elapsed_ms(started));
        }

        // Embed.
        let started = Instant::now();
        let modifier = modifying_text(task, instruction, query);
        let qv = self
            .query_embedding(
                config,
                query,
                modifier.as_deref(),
                trace.target_caption.as_ref().map(|t| t.text.as_str()),
            )
            .map_err(|e| StageError::new(Stage::Embed, e))?;
        trace.timings.insert(Stage::Embed.to_string(), self.clock.elapsed_ms(started));

        // Retrieve.
        let started = Instant::now();
        let exclude: HashSet<String> = trace.ranking.excluded_ids.iter().cloned().collect();
        trace.ranking.ranking = self
            .index
            .top_k(&qv, config.k, &exclude)
            .map_err(|e| StageError::new(Stage::Retrieve, e))?;
        if let Some(subset) = &query.subset_ids {
            let ranking = self
                .index
                .rank_subset(&qv, subset)
                .map_err(|e| StageError::new(Stage::Retrieve, e))?;
            trace.subset_ranking = Some(RankedResult {
                query_id: query.id.clone(),
                mode: config.mode,
                ranking,
                excluded_ids: Vec::new(),
            });
        }
        trace.timings.insert(Stage::Retrieve.to_string(), self.clock.elapsed_ms(started));
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn derive_target(
        &self,
        query: &CompositionalQuery,
        config: &RunConfig,
        task: TaskKind,
        instruction: &str,
        caption: &str,
        calls: &CachedCalls<'_>,
        trace: &mut PipelineTrace,
    ) -> Result<()> {
        let (text, source) = if task == TaskKind::DomainConversion {
            let domain = query.domain_word.as_deref().unwrap_or_default();
            let kind = TargetTemplate::DomainConversion;
            (template_target(kind, caption, domain)?, TargetSource::Template(kind.id().into()))
        } else if config.mode == QueryMode::CaptionTemplate {
            let kind = TargetTemplate::CaptionTemplate;
            (template_target(kind, caption, instruction)?, TargetSource::Template(kind.id().into()))
        } else {
            let template = self.template_for(config, task)?;
            let request = build_reasoner_request(template, caption, instruction)?;
            let raw = calls.reason(&request)?;
            let parsed = parse_edited_description(&raw, template)?;
            if parsed.marker_missing {
                warn!(query = %query.id, "reasoner reply lacks the edited-description marker");
            }
            trace.reasoner_raw_reply = Some(raw);
            trace.marker_missing = parsed.marker_missing;
            (parsed.text, TargetSource::Llm(self.clients.reasoner_id().to_string()))
        };
        trace.target_caption = Some(TargetCaption {
            query_id: query.id.clone(),
            text,
            source,
        });
        Ok(())
    }

    fn check_query(&self, query: &CompositionalQuery, task: TaskKind) -> Result<()> {
        if !self.gallery.contains(&query.reference_image_id) {
            return Err(Error::UnknownId(query.reference_image_id.clone()));
        }
        let unknown: Vec<String> = query
            .positives
            .iter()
            .chain(query.subset_ids.iter().flatten())
            .filter(|id| !self.index.contains(id))
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Integrity { ids: unknown });
        }
        if task == TaskKind::DomainConversion
            && query.domain_word.as_deref().is_none_or(|w| w.trim().is_empty())
        {
            return Err(Error::InvalidInput(format!("query {} has no domain word", query.id)));
        }
        Ok(())
    }

    /// Checks that would fail every query alike.
    pub fn check_config(&self, queries: &[CompositionalQuery], config: &RunConfig) -> Result<()> {
        config.validate()?;
        let tasks: BTreeSet<TaskKind> = queries
            .iter()
            .map(|q| config.task.unwrap_or(q.task))
            .collect();
        if config.mode == QueryMode::Cirevl {
            for &task in tasks.iter().filter(|&&t| t != TaskKind::DomainConversion) {
                self.template_for(config, task)?;
            }
        }
        if config.task == Some(TaskKind::DomainConversion) {
            let missing: Vec<String> = queries
                .iter()
                .filter(|q| q.domain_word.as_deref().is_none_or(|w| w.trim().is_empty()))
                .map(|q| q.id.clone())
                .collect();
            if !missing.is_empty() {
                return Err(Error::Config(format!(
                    "domain-conversion needs a domain word on every query; missing for {}",
                    missing.join(", ")
                )));
            }
        }
        Ok(())
    }

    /// Runs every query, fail-soft. Output order is input order.
    pub fn run_dataset(&self, queries: &[CompositionalQuery], config: &RunConfig) -> Result<DatasetRun> {
        self.check_config(queries, config)?;
        let calls_before = self.clients.calls();
        let cache_before = self.cache.as_ref().map(|c| c.stats()).unwrap_or_default();
        let overrides = Overrides::default();
        let traces = parallel_map(queries, config.parallelism, |q| {
            self.run_query_traced(q, config, &overrides)
        });
        let cache_after = self.cache.as_ref().map(|c| c.stats()).unwrap_or_default();
        let ok = traces.iter().filter(|t| t.is_ok()).count();
        let summary = RunSummary {
            queries: traces.len(),
            ok,
            failed: traces.len() - ok,
            cache_hits: cache_after.hits - cache_before.hits,
            cache_misses: cache_after.misses - cache_before.misses,
            client_calls: self.clients.calls().since(&calls_before),
        };
        Ok(DatasetRun { traces, summary })
    }
}

fn stage_order(stage: Stage) -> usize {
    Stage::ALL.iter().position(|&s| s == stage).unwrap_or(0)
}

/// Instruction text for the text baselines; domain conversion falls back to its domain word.
fn modifying_text(task: TaskKind, instruction: &str, query: &CompositionalQuery) -> Option<String> {
    let instruction = instruction.trim();
    if !instruction.is_empty() {
        return Some(instruction.to_string());
    }
    match task {
        TaskKind::DomainConversion => query.domain_word.clone(),
        _ => None,
    }
}

/// Renormalized sum of two unit vectors.
pub fn compose(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<EmbeddingVector> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let sum: Vec<f64> = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f64::from(x) + f64::from(y))
        .collect();
    let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm >= MIN_COMPOSED_NORM) {
        return Err(Error::DegenerateVector { norm });
    }
    EmbeddingVector::from_f64(&sum.iter().map(|v| v / norm).collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{Embedder, MockEmbedder, MockFixture};
    use crate::model::{cosine, ImageRecord};
    use crate::prompt::task_template;

    const NIGHT: &str = "make it night-time";

    fn fixture() -> MockFixture {
        let template = task_template(TaskKind::Cir).unwrap();
        let request = build_reasoner_request(&template, "a dog on grass", NIGHT).unwrap();
        MockFixture::new(64)
            .with_pseudo_caption("img1", "a dog on grass")
            .with_pseudo_caption("img2", "a dog on grass at night")
            .with_pseudo_caption("img3", "two cats indoors")
            .with_reply(&request, "Edited Description: a dog on grass at night")
    }

    fn gallery() -> Gallery {
        Gallery::new(
            (1..=3).map(|i| ImageRecord::new(format!("img{i}"), format!("img{i}.jpg"))).collect(),
            None,
        )
    }

    fn pipeline_with(clients: ClientSet) -> Pipeline {
        let gallery = gallery();
        let calls = CachedCalls {
            clients: &clients,
            cache: None,
            gallery: &gallery,
            keying: ImageKeying::Uri,
        };
        let embeddings = embed_gallery(&calls, 2).unwrap();
        let index = GalleryIndex::build(embeddings, clients.embedder_id()).unwrap();
        Pipeline::new(clients.clone(), gallery, Arc::new(index)).with_clock(Arc::new(FrozenClock))
    }

    fn pipeline() -> Pipeline {
        pipeline_with(ClientSet::from_fixture(fixture()).unwrap())
    }

    fn query(id: &str, reference: &str) -> CompositionalQuery {
        CompositionalQuery {
            id: id.into(),
            reference_image_id: reference.into(),
            instruction: NIGHT.into(),
            task: TaskKind::Cir,
            subset_ids: None,
            positives: vec!["img2".into()],
            domain_word: None,
        }
    }

    fn cirevl() -> RunConfig {
        RunConfig::new(QueryMode::Cirevl, 3)
    }

    fn v(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn cirevl_puts_night_image_first() {
        let p = pipeline();
        let trace = p.run_query(&query("q1", "img1"), &cirevl(), &Overrides::default()).unwrap();
        assert_eq!(trace.ranking.top1(), Some("img2"));
        assert_eq!(trace.ranking.ids(), ["img2", "img3"]);
        assert_eq!(trace.caption.as_ref().unwrap().text, "a dog on grass");
        let target = trace.target_caption.as_ref().unwrap();
        assert_eq!(target.text, "a dog on grass at night");
        assert_eq!(target.source, TargetSource::Llm("mock-reasoner".into()));
        assert!(!trace.marker_missing);
        let img2 = &trace.ranking.ranking[0];
        assert!((img2.score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn caption_override_feeds_the_fallback_reply() {
        let p = pipeline();
        let q = query("q1", "img1");
        let before = p.run_query(&q, &cirevl(), &Overrides::default()).unwrap();
        let overrides = Overrides {
            caption: Some("a cat indoors".into()),
            ..Default::default()
        };
        let after = p.run_query(&q, &cirevl(), &overrides).unwrap();
        assert_eq!(after.caption.as_ref().unwrap().source, CaptionSource::UserOverride);
        assert_eq!(
            after.target_caption.as_ref().unwrap().text,
            "a cat indoors, make it night-time"
        );
        let score = |t: &PipelineTrace, id: &str| {
            t.ranking.ranking.iter().find(|s| s.image_id == id).unwrap().score
        };
        assert!(score(&before, "img3").abs() < 1e-9);
        assert!(score(&after, "img3") > 0.2);
        assert_ne!(before.ranking, after.ranking);

        // Oracle: cosine of the raw hash embeddings.
        let target = hash_vec("a cat indoors, make it night-time");
        let img3 = hash_vec("two cats indoors");
        assert!((score(&after, "img3") - cosine(&target, &img3).unwrap()).abs() < 1e-6);
    }

    fn hash_vec(text: &str) -> EmbeddingVector {
        EmbeddingVector::new(crate::clients::hash_embed(text, 64)).unwrap()
    }

    #[test]
    fn domain_conversion_uses_template_and_no_reasoner() {
        let fx = MockFixture::new(64)
            .with_pseudo_caption("img1", "goldfish")
            .with_pseudo_caption("img2", "a cartoon of a goldfish")
            .with_pseudo_caption("img3", "two cats indoors");
        let p = pipeline_with(ClientSet::from_fixture(fx).unwrap());
        let mut q = query("q1", "img1");
        q.task = TaskKind::DomainConversion;
        q.instruction = String::new();
        q.domain_word = Some("cartoon".into());
        let before = p.clients().calls();
        let trace = p.run_query(&q, &cirevl(), &Overrides::default()).unwrap();
        let calls = p.clients().calls().since(&before);
        assert_eq!(calls.reasoner, 0);
        assert_eq!(calls.captioner, 1);
        let target = trace.target_caption.unwrap();
        assert_eq!(target.text, "a cartoon of a goldfish");
        assert_eq!(target.source, TargetSource::Template("domain-conversion".into()));
        // Reference stays a candidate for domain conversion.
        assert!(trace.ranking.excluded_ids.is_empty());
        assert_eq!(trace.ranking.ranking.len(), 3);
    }

    #[test]
    fn caption_template_mode() {
        let p = pipeline();
        let mut config = cirevl();
        config.mode = QueryMode::CaptionTemplate;
        let before = p.clients().calls();
        let trace = p.run_query(&query("q1", "img1"), &config, &Overrides::default()).unwrap();
        assert_eq!(
            trace.target_caption.unwrap().text,
            "a photo of a dog on grass that make it night-time"
        );
        assert_eq!(p.clients().calls().since(&before).reasoner, 0);
    }

    #[test]
    fn dataset_call_accounting_and_warm_cache() {
        let cache = Arc::new(ModelCache::in_memory());
        let p = pipeline().with_cache(cache);
        let queries: Vec<_> = (1..=3).map(|i| query(&format!("q{i}"), &format!("img{i}"))).collect();
        let cold = p.run_dataset(&queries, &cirevl()).unwrap();
        assert_eq!(cold.summary.ok, 3);
        assert_eq!(cold.summary.client_calls.captioner, 3);
        assert_eq!(cold.summary.client_calls.reasoner, 3);
        assert_eq!(cold.summary.client_calls.embedder, 3);
        let warm = p.run_dataset(&queries, &cirevl()).unwrap();
        assert_eq!(warm.summary.client_calls.total(), 0);
        assert_eq!(warm.summary.cache_misses, 0);
        assert_eq!(warm.traces, cold.traces);
        let ids: Vec<_> = cold.traces.iter().map(|t| t.query_id.as_str()).collect();
        assert_eq!(ids, ["q1", "q2", "q3"]);
    }

    #[test]
    fn unknown_image_fails_only_its_query() {
        let p = pipeline();
        let queries = vec![query("q1", "img1"), query("q2", "nope"), query("q3", "img3")];
        let run = p.run_dataset(&queries, &cirevl()).unwrap();
        assert_eq!((run.summary.ok, run.summary.failed), (2, 1));
        let failed = &run.traces[1];
        assert_eq!(failed.error.as_ref().unwrap().stage, Stage::Validate);
        assert!(failed.error.as_ref().unwrap().message.contains("nope"));
        assert!(failed.ranking.ranking.is_empty());
        assert!(run.traces[0].is_ok() && run.traces[2].is_ok());
    }

    #[test]
    fn config_errors_abort_before_any_query() {
        let p = pipeline();
        let mut config = cirevl();
        config.template_id = Some("missing".into());
        assert!(matches!(p.run_dataset(&[query("q1", "img1")], &config), Err(Error::Config(_))));
        let mut config = cirevl();
        config.task = Some(TaskKind::DomainConversion);
        assert!(matches!(p.run_dataset(&[query("q1", "img1")], &config), Err(Error::Config(_))));
        assert_eq!(p.clients().calls().total(), 3);
    }

    #[test]
    fn target_override_skips_captioner_and_reasoner() {
        let p = pipeline();
        let before = p.clients().calls();
        let overrides = Overrides {
            caption: Some("ignored".into()),
            target_caption: Some("two cats indoors".into()),
            instruction: Some("also ignored".into()),
        };
        let trace = p.run_query(&query("q1", "img1"), &cirevl(), &overrides).unwrap();
        let calls = p.clients().calls().since(&before);
        assert_eq!((calls.captioner, calls.reasoner, calls.embedder), (0, 0, 1));
        assert_eq!(trace.ranking.top1(), Some("img3"));
        assert_eq!(trace.target_caption.unwrap().source, TargetSource::UserOverride);
    }

    #[test]
    fn reasoner_reply_is_only_composition() {
        let p = pipeline();
        let q = query("q1", "img1");
        let trace = p.run_query(&q, &cirevl(), &Overrides::default()).unwrap();
        let direct = p
            .index()
            .top_k(&p.clients().embed_text("a dog on grass at night").unwrap(), 3, &HashSet::from(["img1".to_string()]))
            .unwrap();
        assert_eq!(trace.ranking.ranking, direct);
    }

    #[test]
    fn instruction_rerun_reuses_caption() {
        let p = pipeline();
        let q = query("q1", "img1");
        let first = p.run_query(&q, &cirevl(), &Overrides::default()).unwrap();
        let before = p.clients().calls();
        let overrides = Overrides {
            instruction: Some("add two cats".into()),
            ..Default::default()
        };
        let second = p.rerun(&q, &cirevl(), &overrides, Some(&first), Stage::Reason).unwrap();
        let calls = p.clients().calls().since(&before);
        assert_eq!((calls.captioner, calls.reasoner), (0, 1));
        assert_eq!(second.caption, first.caption);
        assert_eq!(second.instruction, "add two cats");
        assert_eq!(
            second.target_caption.unwrap().text,
            "a dog on grass, add two cats"
        );
    }

    #[test]
    fn embedder_swap_reuses_text_stages() {
        let cache = Arc::new(ModelCache::in_memory());
        let p = pipeline().with_cache(cache.clone());
        let queries: Vec<_> = (1..=3).map(|i| query(&format!("q{i}"), &format!("img{i}"))).collect();
        p.run_dataset(&queries, &cirevl()).unwrap();

        let fx = Arc::new(fixture());
        let swapped = p
            .clients()
            .with_embedder(Arc::new(MockEmbedder::new(fx, "other-embedder")) as Arc<dyn Embedder>);
        let p2 = pipeline_with(swapped).with_cache(cache);
        let run = p2.run_dataset(&queries, &cirevl()).unwrap();
        let c = run.summary.client_calls;
        assert_eq!((c.captioner, c.reasoner, c.embedder), (0, 0, 3));
    }

    #[test]
    fn baseline_modes() {
        let p = pipeline();
        let q = query("q1", "img1");
        let mut config = cirevl();

        config.mode = QueryMode::ImageOnly;
        let got = p.query_embedding(&config, &q, None, None).unwrap();
        assert!((cosine(&got, &hash_vec("a dog on grass")).unwrap() - 1.0).abs() < 1e-6);

        config.mode = QueryMode::TextOnly;
        assert!(matches!(
            p.query_embedding(&config, &q, None, None),
            Err(Error::ModeInputMissing { .. })
        ));

        config.mode = QueryMode::Cirevl;
        assert!(matches!(
            p.query_embedding(&config, &q, Some(NIGHT), None),
            Err(Error::ModeInputMissing { .. })
        ));

        config.mode = QueryMode::ImagePlusText;
        let before = p.clients().calls();
        let trace = p.run_query(&q, &config, &Overrides::default()).unwrap();
        let calls = p.clients().calls().since(&before);
        assert_eq!((calls.captioner, calls.reasoner), (0, 0));
        assert!(trace.caption.is_none() && trace.target_caption.is_none());
    }

    #[test]
    fn compose_examples() {
        let got = compose(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f64::from(got.values()[0]) - h).abs() < 1e-7);
        assert!((f64::from(got.values()[1]) - h).abs() < 1e-7);
        assert!(matches!(
            compose(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])),
            Err(Error::DegenerateVector { .. })
        ));
    }

    #[test]
    fn subset_ranking_recorded_alongside_full_ranking() {
        let p = pipeline();
        let mut q = query("q1", "img1");
        q.subset_ids = Some(vec!["img3".into(), "img2".into()]);
        let trace = p.run_query(&q, &cirevl(), &Overrides::default()).unwrap();
        assert_eq!(trace.subset_ranking.unwrap().ids(), ["img2", "img3"]);
        assert_eq!(trace.ranking.ids(), ["img2", "img3"]);
    }

    #[test]
    fn exclude_reference_resolution() {
        let p = pipeline();
        let mut config = cirevl();
        assert!(p.exclude_reference(&config, TaskKind::Cir));
        assert!(!p.exclude_reference(&config, TaskKind::DomainConversion));
        let p = p.with_dataset_exclude_reference(Some(false));
        assert!(!p.exclude_reference(&config, TaskKind::Cir));
        config.exclude_reference = Some(true);
        assert!(p.exclude_reference(&config, TaskKind::DomainConversion));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..100).collect();
        let out = parallel_map(&items, 7, |&i| i * 2);
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
        assert!(parallel_map(&Vec::<usize>::new(), 4, |&i| i).is_empty());
    }

    #[test]
    fn mock_runs_are_byte_identical() {
        let queries: Vec<_> = (1..=3).map(|i| query(&format!("q{i}"), &format!("img{i}"))).collect();
        let a = pipeline().run_dataset(&queries, &cirevl()).unwrap();
        let b = pipeline().run_dataset(&queries, &cirevl()).unwrap();
        let bytes = |r: &DatasetRun| serde_json::to_string(&r.traces).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
    }
}
