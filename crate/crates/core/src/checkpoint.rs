//! Model checkpoints: one `.ten` file per parameter plus a JSON manifest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::io::{read_ten, write_ten, TenArray};
use crate::towers::{Model, ModelConfig};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Parameter name to file name, relative to the checkpoint directory.
    pub params: BTreeMap<String, String>,
    /// Free-form record of how the weights were produced.
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save(model: &Model<f32>, dir: &Path, extra: serde_json::Value) -> Result<CheckpointManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = BTreeMap::new();
    for (name, t) in model.params.iter() {
        let file = format!("{name}.ten");
        write_ten(&dir.join(&file), &TenArray::from_tensor(t))?;
        params.insert(name.to_string(), file);
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        model: model.config.clone(),
        params,
        extra,
    };
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<(Model<f32>, CheckpointManifest)> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Integrity(format!("no checkpoint manifest at {}", path.display())),
        _ => Error::io(&path, e),
    })?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    let reference = Model::<f32>::new(manifest.model.clone(), 0)?;
    let mut store = ParamStore::new();
    for (name, file) in &manifest.params {
        let p = dir.join(file);
        if !p.is_file() {
            return Err(Error::Integrity(format!("checkpoint file {file} is missing")));
        }
        let mut t = read_ten(&p)?.to_tensor::<f32>()?;
        // Trainability is a property of the architecture, not of the file.
        t.requires_grad = reference.params.get(name).map(|r| r.requires_grad).unwrap_or(true);
        store.insert(name.clone(), t);
    }
    let model = Model::with_params(manifest.model.clone(), store).map_err(|e| match e {
        Error::Config(msg) => Error::Integrity(format!("checkpoint does not match its model config: {msg}")),
        other => other,
    })?;
    Ok((model, manifest))
}
