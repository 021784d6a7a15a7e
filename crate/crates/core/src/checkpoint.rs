//! Versioned JSON container of named weight arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Module, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    /// What the weights belong to, e.g. `"ddpm"` or `"encoder:mri"`.
    pub kind: String,
    pub config_hash: String,
    /// Kind-specific constants (architecture, schedule, epoch).
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_module<M: Module + ?Sized>(
        kind: &str,
        config_hash: &str,
        meta: serde_json::Value,
        module: &M,
    ) -> Self {
        let arrays = module
            .parameter_names()
            .into_iter()
            .zip(module.parameters())
            .map(|(name, p)| NamedArray {
                name,
                shape: p.shape().to_vec(),
                data: p.data().to_vec(),
            })
            .collect();
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            config_hash: config_hash.to_string(),
            meta,
            arrays,
        }
    }

    /// Copies stored arrays into `module`, matching by position and checking
    /// names and shapes.
    pub fn load_into<M: Module + ?Sized>(&self, module: &mut M) -> Result<()> {
        let names = module.parameter_names();
        let params = module.parameters_mut();
        if params.len() != self.arrays.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} arrays, module expects {}",
                self.arrays.len(),
                params.len()
            )));
        }
        for ((p, name), a) in params.into_iter().zip(names).zip(&self.arrays) {
            if a.name != name || a.shape != p.shape() {
                return Err(Error::contract(format!(
                    "checkpoint array {} {:?} does not match parameter {} {:?}",
                    a.name,
                    a.shape,
                    name,
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(&a.data);
            p.zero_grad();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unsupported checkpoint version {}", ck.format_version),
            });
        }
        Ok(ck)
    }
}

/// SHA-256 over parameter shapes and the bit patterns of their values.
pub fn weights_hash<M: Module + ?Sized>(module: &M) -> String {
    tensors_hash(module.parameters())
}

pub fn tensors_hash<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        h.update((t.shape().len() as u64).to_le_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &x in t.data() {
            h.update(x.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
