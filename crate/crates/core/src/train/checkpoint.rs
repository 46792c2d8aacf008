//! Checkpoint directories: `manifest.toml` plus one little-endian f64 blob per tensor.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_specs, Model, ModelConfig, ParamStore};
use crate::preprocess::ReferenceStats;
use crate::tensor::Tensor;
use crate::train::optim::{AdamWConfig, Moments, OptimizerState};
use crate::train::schedule::Stage;

pub const MANIFEST: &str = "manifest.toml";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    /// Optimizer steps taken; absent when the parameter never trained.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub epoch: usize,
    pub seed: u64,
    /// Validation loss at save time, if known.
    pub val_loss: Option<f64>,
    pub optimizer: AdamWConfig,
    pub model: ModelConfig,
    pub reference: Option<ReferenceStats>,
    pub params: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub optimizer_config: AdamWConfig,
    pub stage: Stage,
    pub epoch: usize,
    pub seed: u64,
    pub val_loss: Option<f64>,
    pub reference: Option<ReferenceStats>,
}

/// File-system-safe stem for a parameter name.
fn blob_name(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '-' }).collect()
}

fn write_blob(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * 8 {
        return Err(Error::format(path, format!("expected {} bytes for shape {shape:?}, found {}", n * 8, bytes.len())));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Tensor::new(shape, data)
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["params", "moments"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut entries = Vec::new();
        for p in self.model.params.iter() {
            let file = format!("params/{}.bin", blob_name(&p.name));
            write_blob(&dir.join(&file), &p.value)?;
            let moments = self.optimizer.moments.get(&p.name);
            if let Some(m) = moments {
                let stem = blob_name(&p.name);
                write_blob(&dir.join(format!("moments/{stem}.m.bin")), &m.m)?;
                write_blob(&dir.join(format!("moments/{stem}.v.bin")), &m.v)?;
            }
            entries.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                file,
                steps: moments.map(|m| m.step),
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            epoch: self.epoch,
            seed: self.seed,
            val_loss: self.val_loss,
            optimizer: self.optimizer_config,
            model: self.model.config.clone(),
            reference: self.reference.clone(),
            params: entries,
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::format(dir.join(MANIFEST), e.to_string()))?;
        let path = dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path: PathBuf = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(&path, format!("unsupported format version {}", manifest.format_version)));
        }
        manifest.model.validate()?;
        let specs = param_specs(&manifest.model);
        if specs.len() != manifest.params.len() {
            return Err(Error::format(&path, "parameter list does not match the model configuration"));
        }
        let mut store = ParamStore::default();
        let mut optimizer = OptimizerState::default();
        for (spec, e) in specs.iter().zip(&manifest.params) {
            if spec.name != e.name || spec.shape != e.shape {
                return Err(Error::format(&path, format!("unexpected parameter `{}` {:?}", e.name, e.shape)));
            }
            store.insert(e.name.clone(), read_blob(&dir.join(&e.file), &e.shape)?)?;
            if let Some(step) = e.steps {
                let stem = blob_name(&e.name);
                optimizer.moments.insert(
                    e.name.clone(),
                    Moments {
                        m: read_blob(&dir.join(format!("moments/{stem}.m.bin")), &e.shape)?,
                        v: read_blob(&dir.join(format!("moments/{stem}.v.bin")), &e.shape)?,
                        step,
                    },
                );
            }
        }
        Ok(Self {
            model: Model {
                config: manifest.model,
                params: store,
            },
            optimizer,
            optimizer_config: manifest.optimizer,
            stage: manifest.stage,
            epoch: manifest.epoch,
            seed: manifest.seed,
            val_loss: manifest.val_loss,
            reference: manifest.reference,
        })
    }
}
