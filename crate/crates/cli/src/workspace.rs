//! Read-only state shared by the service: models, images and an optional index.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use metric_lens::format::read_tensor;
use metric_lens::nn::Model;
use metric_lens::retrieval::EmbeddingIndex;
use metric_lens::Tensor;
use serde::{Deserialize, Serialize};

pub const WORKSPACE_ENV: &str = "METRIC_LENS_WORKSPACE";

/// On-disk workspace description; relative paths resolve against the
/// config file's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorkspaceConfig {
    pub model: PathBuf,
    /// Reference-stream model for two-branch networks; defaults to `model`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ref_model: Option<PathBuf>,
    pub image_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("cannot read workspace config {path}: {source}")]
    Config {
        path: PathBuf,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("{what} {path}: {source}")]
    Load {
        what: &'static str,
        path: PathBuf,
        source: metric_lens::Error,
    },
}

pub struct Workspace {
    pub model: Model,
    pub ref_model: Option<Model>,
    pub images: BTreeMap<String, Tensor>,
    pub image_paths: BTreeMap<String, PathBuf>,
    pub index: Option<EmbeddingIndex>,
}

fn load_err(what: &'static str, path: &Path) -> impl FnOnce(metric_lens::Error) -> WorkspaceError {
    let path = path.to_path_buf();
    move |source| WorkspaceError::Load { what, path, source }
}

impl Workspace {
    pub fn open(config_path: impl AsRef<Path>) -> Result<Self, WorkspaceError> {
        let config_path = config_path.as_ref();
        let config_err =
            |source: Box<dyn std::error::Error + Send + Sync>| WorkspaceError::Config {
                path: config_path.to_path_buf(),
                source,
            };
        let bytes = fs::read(config_path).map_err(|e| config_err(e.into()))?;
        let config: WorkspaceConfig =
            serde_json::from_slice(&bytes).map_err(|e| config_err(e.into()))?;
        let base = config_path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_config(&config, base)
    }

    pub fn from_config(config: &WorkspaceConfig, base: &Path) -> Result<Self, WorkspaceError> {
        let model_path = base.join(&config.model);
        let model = Model::load(&model_path).map_err(load_err("model", &model_path))?;
        let ref_model = match &config.ref_model {
            Some(p) => {
                let p = base.join(p);
                Some(Model::load(&p).map_err(load_err("reference model", &p))?)
            }
            None => None,
        };
        let image_dir = base.join(&config.image_dir);
        let (images, image_paths) = load_images(&image_dir)?;
        let index = match &config.index_dir {
            Some(dir) => {
                let dir = base.join(dir);
                Some(EmbeddingIndex::load(&dir).map_err(load_err("index", &dir))?)
            }
            None => None,
        };
        Ok(Self {
            model,
            ref_model,
            images,
            image_paths,
            index,
        })
    }

    pub fn ref_model(&self) -> &Model {
        self.ref_model.as_ref().unwrap_or(&self.model)
    }
}

/// Every `*.tnsr` in `dir`, keyed by file stem.
pub fn image_files(dir: &Path) -> metric_lens::Result<Vec<(String, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "tnsr") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                found.push((stem.to_string(), path.clone()));
            }
        }
    }
    found.sort();
    Ok(found)
}

type Images = (BTreeMap<String, Tensor>, BTreeMap<String, PathBuf>);

fn load_images(dir: &Path) -> Result<Images, WorkspaceError> {
    let files = image_files(dir).map_err(load_err("image directory", dir))?;
    let mut images = BTreeMap::new();
    let mut paths = BTreeMap::new();
    for (id, path) in files {
        let t = read_tensor(&path).map_err(load_err("image", &path))?;
        images.insert(id.clone(), t);
        paths.insert(id, path);
    }
    Ok((images, paths))
}
