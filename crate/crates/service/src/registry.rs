//! Read-only set of generator checkpoints served by the process.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use fxsr::inference::SrModel;
use serde::{Deserialize, Serialize};

use crate::ApiError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub scale: usize,
    pub variant: String,
    pub iteration: u64,
}

#[derive(Debug, Clone)]
enum Slot {
    Loading,
    Ready(Arc<SrModel>),
}

#[derive(Debug, Default)]
pub struct Registry {
    slots: RwLock<BTreeMap<String, Slot>>,
}

pub const CHECKPOINT_EXT: &str = "safetensors";

/// Checkpoint files directly inside `dir`, keyed by file stem, sorted by id.
pub fn scan(dir: &Path) -> std::io::Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == CHECKPOINT_EXT) {
            if let Some(stem) = path.file_stem() {
                found.push((stem.to_string_lossy().into_owned(), path));
            }
        }
    }
    found.sort();
    Ok(found)
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_models(models: impl IntoIterator<Item = SrModel>) -> Self {
        let r = Self::new();
        for m in models {
            r.insert(m);
        }
        r
    }

    pub fn insert(&self, model: SrModel) {
        let id = model.id().to_string();
        self.slots
            .write()
            .unwrap()
            .insert(id, Slot::Ready(Arc::new(model)));
    }

    /// Registers `id` as known but not yet usable (requests get 503).
    pub fn mark_loading(&self, id: &str) {
        self.slots
            .write()
            .unwrap()
            .insert(id.to_string(), Slot::Loading);
    }

    pub fn remove(&self, id: &str) {
        self.slots.write().unwrap().remove(id);
    }

    /// Marks every checkpoint in `dir` as loading, then loads them in order.
    /// Unreadable checkpoints are logged and dropped.
    pub fn load_dir(&self, dir: &Path) -> std::io::Result<()> {
        let found = scan(dir)?;
        for (id, _) in &found {
            self.mark_loading(id);
        }
        for (id, path) in found {
            match SrModel::load(&path) {
                Ok(model) => {
                    log::info!("loaded model {id} (scale {})", model.scale());
                    self.insert(model);
                }
                Err(e) => {
                    log::error!("skipping {}: {e}", path.display());
                    self.remove(&id);
                }
            }
        }
        Ok(())
    }

    /// Ready models only.
    pub fn list(&self) -> Vec<ModelInfo> {
        self.slots
            .read()
            .unwrap()
            .iter()
            .filter_map(|(id, slot)| match slot {
                Slot::Ready(m) => Some(ModelInfo {
                    id: id.clone(),
                    scale: m.scale(),
                    variant: m.manifest().variant.as_str().to_string(),
                    iteration: m.manifest().iteration,
                }),
                Slot::Loading => None,
            })
            .collect()
    }

    /// The named model, or the only one when no name is given.
    pub fn resolve(&self, id: Option<&str>) -> Result<Arc<SrModel>, ApiError> {
        let slots = self.slots.read().unwrap();
        let (id, slot) = match id {
            Some(id) => (
                id.to_string(),
                slots
                    .get(id)
                    .ok_or_else(|| ApiError::not_found(format!("unknown model {id:?}")))?,
            ),
            None if slots.len() == 1 => {
                let (k, v) = slots.iter().next().expect("one entry");
                (k.clone(), v)
            }
            None if slots.is_empty() => {
                return Err(ApiError::not_found("no models are loaded".into()))
            }
            None => {
                return Err(ApiError::bad_request(
                    "several models are loaded; the model field is required".into(),
                ))
            }
        };
        match slot {
            Slot::Ready(m) => Ok(m.clone()),
            Slot::Loading => Err(ApiError::unavailable(format!("model {id:?} is still loading"))),
        }
    }
}
