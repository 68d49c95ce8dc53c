//! Loading the pieces a command needs from the paths it was given.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cir_core::clients::{ClientSet, ClientsConfig};
use cir_core::pipeline::{Clock, FrozenClock, Pipeline, SystemClock};
use cir_core::prompt::TemplateStore;
use cir_core::storage::{load_dataset, read_embeddings, AdapterMapping, CanonicalDataset, ImageKeying, ModelCache};
use cir_core::GalleryIndex;
use tracing::warn;

use crate::AppError;

fn require_file(path: &Path, what: &str) -> Result<(), AppError> {
    if !path.exists() {
        return Err(AppError::Usage(format!("{what} not found: {}", path.display())));
    }
    Ok(())
}

pub fn dataset(path: &Path, mapping: Option<&Path>) -> Result<CanonicalDataset, AppError> {
    require_file(path, "dataset")?;
    let mapping = match mapping {
        Some(m) => {
            require_file(m, "mapping")?;
            Some(AdapterMapping::load(m).map_err(|e| AppError::from_core(m.display(), e))?)
        }
        None => None,
    };
    load_dataset(path, mapping.as_ref()).map_err(|e| AppError::from_core(path.display(), e))
}

pub struct Clients {
    pub set: ClientSet,
    pub mock: bool,
}

impl Clients {
    /// Mock clients get a frozen clock so repeated runs are byte-identical.
    pub fn clock(&self) -> Arc<dyn Clock> {
        if self.mock {
            Arc::new(FrozenClock)
        } else {
            Arc::new(SystemClock)
        }
    }
}

pub fn clients(path: &Path) -> Result<Clients, AppError> {
    require_file(path, "clients config")?;
    let config = ClientsConfig::load(path).map_err(|e| AppError::from_core(path.display(), e))?;
    let set = config
        .build()
        .map_err(|e| AppError::Usage(format!("{}: {e}", path.display())))?;
    Ok(Clients {
        set,
        mock: config.is_mock(),
    })
}

pub fn cache(dir: Option<&Path>) -> Result<Option<Arc<ModelCache>>, AppError> {
    dir.map(|d| {
        ModelCache::open(d)
            .map(Arc::new)
            .map_err(|e| AppError::from_core(d.display(), e))
    })
    .transpose()
}

pub fn templates(dir: Option<&Path>) -> Result<TemplateStore, AppError> {
    match dir {
        Some(d) => TemplateStore::load_dir(d).map_err(|e| AppError::from_core(d.display(), e)),
        None => Ok(TemplateStore::builtin()),
    }
}

/// Index over the dataset's images, read from an embeddings file.
/// Every dataset image must be present; extra ids are dropped.
pub fn index(
    path: &Path,
    dataset: &CanonicalDataset,
    backend_model_id: &str,
) -> Result<GalleryIndex, AppError> {
    require_file(path, "embeddings")?;
    let items = read_embeddings(path).map_err(|e| AppError::from_core(path.display(), e))?;
    let wanted: HashSet<&str> = dataset.images.iter().map(|i| i.id.as_str()).collect();
    let have: HashSet<&str> = items.iter().map(|(id, _)| id.as_str()).collect();
    let mut missing: Vec<&str> = wanted.difference(&have).copied().collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        return Err(AppError::Usage(format!(
            "{} lacks embeddings for {}",
            path.display(),
            missing.join(", ")
        )));
    }
    let extra = have.difference(&wanted).count();
    if extra > 0 {
        warn!("{extra} embeddings are not in the dataset and were skipped");
    }
    let items = items.into_iter().filter(|(id, _)| wanted.contains(id.as_str()));
    GalleryIndex::build(items, backend_model_id).map_err(|e| AppError::from_core(path.display(), e))
}

/// Everything `run` and `serve` share.
pub struct PipelineInputs {
    pub dataset: PathBuf,
    pub mapping: Option<PathBuf>,
    pub embeddings: PathBuf,
    pub clients: PathBuf,
    pub cache: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
    pub image_keying: ImageKeying,
}

pub fn pipeline(inputs: &PipelineInputs) -> Result<(CanonicalDataset, Pipeline), AppError> {
    let dataset = dataset(&inputs.dataset, inputs.mapping.as_deref())?;
    let clients = clients(&inputs.clients)?;
    let index = index(&inputs.embeddings, &dataset, clients.set.embedder_id())?;
    let mut pipeline = Pipeline::new(clients.set.clone(), dataset.gallery(), Arc::new(index))
        .with_templates(Arc::new(templates(inputs.templates_dir.as_deref())?))
        .with_clock(clients.clock())
        .with_image_keying(inputs.image_keying)
        .with_dataset_exclude_reference(dataset.default_exclude_reference);
    if let Some(cache) = cache(inputs.cache.as_deref())? {
        pipeline = pipeline.with_cache(cache);
    }
    Ok((dataset, pipeline))
}
