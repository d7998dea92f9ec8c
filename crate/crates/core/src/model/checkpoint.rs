//! Checkpoints: a JSON manifest plus an adjacent blob of little-endian f32.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{MessageEdge, RunConfig};
use crate::encoders::Vocabulary;
use crate::error::{FgaError, Result};
use crate::math::Tensor;
use crate::model::Model;

pub const CHECKPOINT_FORMAT: &str = "fga-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub vocab: BTreeMap<String, usize>,
    pub pruned: Vec<MessageEdge>,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

/// Model state rounded to `f32`: parameters followed by batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub pruned: Vec<MessageEdge>,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn stat_names(bn: &str) -> (String, String) {
    (format!("{bn}.running_mean"), format!("{bn}.running_var"))
}

fn blob_path(path: &Path) -> Result<(PathBuf, String)> {
    if path.extension().is_some_and(|e| e == "bin") {
        return Err(FgaError::Checkpoint {
            path: path.to_path_buf(),
            detail: "manifest path must not end in .bin".into(),
        });
    }
    let blob = path.with_extension("bin");
    let name = blob
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| FgaError::Checkpoint {
            path: path.to_path_buf(),
            detail: "invalid file name".into(),
        })?
        .to_string();
    Ok((blob, name))
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = model
            .store
            .iter()
            .map(|(_, p)| {
                let v = p.value.data().iter().map(|&x| x as f32).collect();
                (p.name().to_string(), p.value.shape().to_vec(), v)
            })
            .collect();
        for bn in model.batch_norms() {
            let (m, v) = stat_names(&bn.name);
            let c = bn.channels();
            tensors.push((m, vec![c], bn.running_mean.iter().map(|&x| x as f32).collect()));
            tensors.push((v, vec![c], bn.running_var.iter().map(|&x| x as f32).collect()));
        }
        Checkpoint {
            config: model.config.clone(),
            vocab: model.vocab.clone(),
            pruned: model.pruned.iter().cloned().collect(),
            tensors,
        }
    }

    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// Rebuilds the model. Batch-norm statistics are taken as final.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), self.vocab.clone())?;
        let bad = |detail: String| FgaError::Checkpoint {
            path: "<memory>".into(),
            detail,
        };
        let mut stats: BTreeMap<&str, &Vec<f32>> = BTreeMap::new();
        let mut seen = 0;
        for (name, shape, values) in &self.tensors {
            if let Some(id) = model.store.id(name) {
                let t = Tensor::new(shape.clone(), values.iter().map(|&v| v as f64).collect())?;
                model
                    .store
                    .set_value(id, t)
                    .map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
                seen += 1;
            } else {
                stats.insert(name, values);
            }
        }
        if seen != model.store.len() {
            return Err(bad(format!("{} of {} parameters present", seen, model.store.len())));
        }
        let names: Vec<String> = model.batch_norms().map(|b| b.name.clone()).collect();
        for name in names {
            let (m, v) = stat_names(&name);
            let (Some(mean), Some(var)) = (stats.remove(m.as_str()), stats.remove(v.as_str())) else {
                return Err(bad(format!("missing running statistics for `{name}`")));
            };
            let bn = model.batch_norm_mut(&name).expect("listed batch norm");
            if mean.len() != bn.channels() || var.len() != bn.channels() {
                return Err(bad(format!("running statistics for `{name}` have the wrong length")));
            }
            bn.running_mean = mean.iter().map(|&x| x as f64).collect();
            bn.running_var = var.iter().map(|&x| x as f64).collect();
            bn.ready = true;
        }
        if let Some(extra) = stats.keys().next() {
            return Err(bad(format!("unknown tensor `{extra}`")));
        }
        model.set_pruned(self.pruned.iter().cloned().collect())?;
        Ok(model)
    }

    /// Writes `path` (manifest) and `path` with a `.bin` extension (blob).
    pub fn save(&self, path: &Path) -> Result<()> {
        let (blob, blob_name) = blob_path(path)?;
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, shape, values) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                dtype: "f32".into(),
                byte_offset: bytes.len() as u64,
            });
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            config_hash: self.config_hash(),
            config: self.config.clone(),
            vocab: self.vocab.to_map(),
            pruned: self.pruned.clone(),
            blob: blob_name,
            tensors: entries,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        std::fs::write(&blob, bytes).map_err(|e| FgaError::io(format!("writing {}", blob.display()), e))?;
        std::fs::write(path, text).map_err(|e| FgaError::io(format!("writing {}", path.display()), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fail = |detail: String| FgaError::Checkpoint {
            path: path.to_path_buf(),
            detail,
        };
        let text = std::fs::read_to_string(path).map_err(|e| FgaError::io(format!("reading {}", path.display()), e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| FgaError::json(format!("parsing {}", path.display()), e))?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(fail(format!("unsupported format `{}`", manifest.format)));
        }
        manifest.config.validate()?;
        if manifest.config.hash() != manifest.config_hash {
            return Err(fail("config hash does not match the stored config".into()));
        }
        let blob = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let bytes = std::fs::read(&blob).map_err(|e| FgaError::io(format!("reading {}", blob.display()), e))?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for t in &manifest.tensors {
            if t.dtype != "f32" {
                return Err(fail(format!("tensor `{}` has dtype {}", t.name, t.dtype)));
            }
            let count: usize = t.shape.iter().product();
            let start = t.byte_offset as usize;
            let end = start + 4 * count;
            let raw = bytes
                .get(start..end)
                .ok_or_else(|| fail(format!("tensor `{}` runs past the end of the blob", t.name)))?;
            let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((t.name.clone(), t.shape.clone(), values));
        }
        Ok(Checkpoint {
            config: manifest.config,
            vocab: Vocabulary::from_map(manifest.vocab)?,
            pruned: manifest.pruned,
            tensors,
        })
    }
}
