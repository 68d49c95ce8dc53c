//! Dataset loading.
//!
//! A canonical dataset file is the JSON form of [`CanonicalDataset`]. Public
//! benchmark releases use their own layouts; an [`AdapterMapping`] says where
//! each canonical field lives in such a file using dotted paths
//! (`"annotations"`, `"img_set.members"`, `"targets.0"`).

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{CompositionalQuery, ImageRecord, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalDataset {
    pub name: String,
    pub images: Vec<ImageRecord>,
    pub queries: Vec<CompositionalQuery>,
    /// Unset means each query's task decides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default_exclude_reference: Option<bool>,
    /// Directory relative image uris resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl CanonicalDataset {
    /// Checks id uniqueness and that every query reference resolves.
    /// The error lists every offending id.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut seen = HashSet::new();
        for image in &self.images {
            if image.id.is_empty() || image.uri.is_empty() {
                bad.push(format!("image `{}`: empty id or uri", image.id));
            } else if !seen.insert(image.id.as_str()) {
                bad.push(format!("duplicate image {}", image.id));
            }
        }
        let mut query_ids = HashSet::new();
        for q in &self.queries {
            if !query_ids.insert(q.id.as_str()) {
                bad.push(format!("duplicate query {}", q.id));
            }
            if let Err(ids) = q.validate(|id| seen.contains(id)) {
                for id in ids {
                    if !bad.contains(&id) {
                        bad.push(id);
                    }
                }
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Integrity { ids: bad })
        }
    }

    pub fn image_map(&self) -> HashMap<String, ImageRecord> {
        self.images.iter().map(|i| (i.id.clone(), i.clone())).collect()
    }

    pub fn image(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn gallery(&self) -> Gallery {
        Gallery::new(self.images.clone(), self.base_dir.clone())
    }
}

/// Image records keyed by id, with file resolution for local uris.
#[derive(Debug, Clone, Default)]
pub struct Gallery {
    images: Arc<HashMap<String, ImageRecord>>,
    base_dir: Option<PathBuf>,
}

impl Gallery {
    pub fn new(images: Vec<ImageRecord>, base_dir: Option<PathBuf>) -> Self {
        Self {
            images: Arc::new(images.into_iter().map(|i| (i.id.clone(), i)).collect()),
            base_dir,
        }
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.images.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.images.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.values()
    }

    /// Local path for a uri without a scheme, resolved against the dataset directory.
    pub fn local_path(&self, record: &ImageRecord) -> Option<PathBuf> {
        let uri = record.uri.strip_prefix("file://").unwrap_or(&record.uri);
        if uri.contains("://") {
            return None;
        }
        let path = Path::new(uri);
        Some(match (&self.base_dir, path.is_relative()) {
            (Some(dir), true) => dir.join(path),
            _ => path.to_path_buf(),
        })
    }

    /// File bytes when the uri names a readable local file.
    pub fn read_local(&self, record: &ImageRecord) -> Option<Vec<u8>> {
        let path = self.local_path(record)?;
        if path.is_file() {
            fs::read(path).ok()
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagesMapping {
    /// Where the image list lives. An object there is read as an id -> uri map;
    /// an array as records (or bare id strings, with `uri_template`).
    pub path: String,
    #[serde(default = "ImagesMapping::default_id")]
    pub id: String,
    #[serde(default = "ImagesMapping::default_uri")]
    pub uri: String,
    /// `{id}` is replaced by the image id.
    #[serde(default)]
    pub uri_template: Option<String>,
}

impl ImagesMapping {
    fn default_id() -> String {
        "id".into()
    }
    fn default_uri() -> String {
        "uri".into()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueriesMapping {
    pub path: String,
    /// Falls back to the query's position when absent.
    #[serde(default)]
    pub id: Option<String>,
    pub reference_image_id: String,
    pub instruction: String,
    /// A string or an array of ids.
    pub positives: String,
    #[serde(default)]
    pub subset_ids: Option<String>,
    #[serde(default)]
    pub domain_word: Option<String>,
    /// Field holding the task name; when absent every query gets `task`.
    #[serde(default)]
    pub task_field: Option<String>,
    #[serde(default = "QueriesMapping::default_task")]
    pub task: TaskKind,
}

impl QueriesMapping {
    fn default_task() -> TaskKind {
        TaskKind::Cir
    }
}

/// Declarative translation from a source layout into a canonical dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterMapping {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub default_exclude_reference: Option<bool>,
    pub images: ImagesMapping,
    pub queries: QueriesMapping,
}

impl AdapterMapping {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), &e))
    }
}

fn lookup<'a>(value: &'a Value, path: &str) -> Option<&'a Value> {
    if path.is_empty() {
        return Some(value);
    }
    path.split('.').try_fold(value, |v, seg| match v {
        Value::Object(m) => m.get(seg),
        Value::Array(a) => seg.parse::<usize>().ok().and_then(|i| a.get(i)),
        _ => None,
    })
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn id_list(v: &Value) -> Option<Vec<String>> {
    match v {
        Value::Array(items) => items.iter().map(scalar).collect(),
        other => scalar(other).map(|s| vec![s]),
    }
}

struct Mapper<'a> {
    errors: Vec<String>,
    source: &'a Value,
}

impl<'a> Mapper<'a> {
    fn required(&mut self, item: &Value, path: &str, what: &str) -> Option<String> {
        let found = lookup(item, path).and_then(scalar);
        if found.is_none() {
            self.errors.push(format!("{what}: missing field `{path}`"));
        }
        found
    }

    fn images(&mut self, m: &ImagesMapping) -> Vec<ImageRecord> {
        let Some(node) = lookup(self.source, &m.path) else {
            self.errors.push(format!("images: missing path `{}`", m.path));
            return Vec::new();
        };
        let from_template = |id: &str| m.uri_template.as_ref().map(|t| t.replace("{id}", id));
        match node {
            Value::Object(map) => map
                .iter()
                .filter_map(|(id, uri)| {
                    let uri = scalar(uri).or_else(|| from_template(id));
                    match uri {
                        Some(uri) => Some(ImageRecord::new(id.clone(), uri)),
                        None => {
                            self.errors.push(format!("image {id}: no uri"));
                            None
                        }
                    }
                })
                .collect(),
            Value::Array(items) => items
                .iter()
                .enumerate()
                .filter_map(|(n, item)| {
                    let what = format!("image #{n}");
                    let id = match item {
                        Value::Object(_) => self.required(item, &m.id, &what)?,
                        other => match scalar(other) {
                            Some(id) => id,
                            None => {
                                self.errors.push(format!("{what}: not an id"));
                                return None;
                            }
                        },
                    };
                    let uri = lookup(item, &m.uri)
                        .filter(|_| item.is_object())
                        .and_then(scalar)
                        .or_else(|| from_template(&id));
                    match uri {
                        Some(uri) => Some(ImageRecord::new(id, uri)),
                        None => {
                            self.errors.push(format!("{what}: no uri at `{}`", m.uri));
                            None
                        }
                    }
                })
                .collect(),
            _ => {
                self.errors.push(format!("images: `{}` is not an array or object", m.path));
                Vec::new()
            }
        }
    }

    fn queries(&mut self, m: &QueriesMapping) -> Vec<CompositionalQuery> {
        let Some(Value::Array(items)) = lookup(self.source, &m.path) else {
            self.errors.push(format!("queries: `{}` is not an array", m.path));
            return Vec::new();
        };
        let mut out = Vec::with_capacity(items.len());
        for (n, item) in items.iter().enumerate() {
            let what = format!("query #{n}");
            let id = match &m.id {
                Some(p) => self.required(item, p, &what),
                None => Some(format!("q{n}")),
            };
            let reference = self.required(item, &m.reference_image_id, &what);
            let instruction = self.required(item, &m.instruction, &what);
            let positives = lookup(item, &m.positives).and_then(id_list);
            if positives.is_none() {
                self.errors.push(format!("{what}: missing positives at `{}`", m.positives));
            }
            let subset_ids = m
                .subset_ids
                .as_ref()
                .and_then(|p| lookup(item, p))
                .and_then(id_list);
            let domain_word = m.domain_word.as_ref().and_then(|p| lookup(item, p)).and_then(scalar);
            let task = match &m.task_field {
                Some(p) => match lookup(item, p).and_then(scalar).map(|s| s.parse::<TaskKind>()) {
                    Some(Ok(t)) => Some(t),
                    _ => {
                        self.errors.push(format!("{what}: bad or missing task at `{p}`"));
                        None
                    }
                },
                None => Some(m.task),
            };
            if let (Some(id), Some(reference_image_id), Some(instruction), Some(positives), Some(task)) =
                (id, reference, instruction, positives, task)
            {
                out.push(CompositionalQuery {
                    id,
                    reference_image_id,
                    instruction,
                    task,
                    subset_ids,
                    positives,
                    domain_word,
                });
            }
        }
        out
    }
}

fn apply_mapping(source: &Value, mapping: &AdapterMapping, fallback_name: &str) -> Result<CanonicalDataset> {
    let mut mapper = Mapper {
        errors: Vec::new(),
        source,
    };
    let images = mapper.images(&mapping.images);
    let queries = mapper.queries(&mapping.queries);
    if !mapper.errors.is_empty() {
        return Err(Error::Integrity { ids: mapper.errors });
    }
    Ok(CanonicalDataset {
        name: mapping.name.clone().unwrap_or_else(|| fallback_name.to_string()),
        images,
        queries,
        default_exclude_reference: mapping.default_exclude_reference,
        base_dir: None,
    })
}

/// Loads and validates a dataset; `mapping` is required for non-canonical files.
pub fn load_dataset(path: &Path, mapping: Option<&AdapterMapping>) -> Result<CanonicalDataset> {
    let text = fs::read_to_string(path)?;
    let name = path.display().to_string();
    let mut dataset = match mapping {
        None => serde_json::from_str::<CanonicalDataset>(&text).map_err(|e| Error::parse(&name, &e))?,
        Some(mapping) => {
            let source: Value = serde_json::from_str(&text).map_err(|e| Error::parse(&name, &e))?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
            apply_mapping(&source, mapping, stem)?
        }
    };
    dataset.base_dir = path.parent().map(Path::to_path_buf);
    dataset.validate()?;
    Ok(dataset)
}
