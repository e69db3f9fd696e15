use std::cell::RefCell;
use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor, Var};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use super::TrainConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "fsfm-checkpoint/1";

/// Where the data stream resumes: every batch and mask is derived from
/// `(seed, step)`, so this is the whole RNG state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub step: usize,
    pub optim_t: u64,
    pub rng: RngState,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Writes online and target parameters, optimizer moments and metadata to one
/// safetensors archive. The file is written next to `path` and renamed into
/// place.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    online: &[(String, &Var)],
    target: &[(String, &Var)],
    optim: &AdamW,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, v) in online {
        tensors.push((format!("online.{name}"), v.as_tensor().clone()));
    }
    for (name, v) in target {
        tensors.push((format!("target.{name}"), v.as_tensor().clone()));
    }
    for s in &optim.states {
        tensors.push((format!("optim.m.{}", s.name), s.m.clone()));
        tensors.push((format!("optim.v.{}", s.name), s.v.clone()));
    }
    let mut info = HashMap::new();
    info.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    info.insert("meta".to_string(), serde_json::to_string(meta)?);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    safetensors::serialize_to_file(tensors, Some(info), &tmp).map_err(|e| ckpt_err(path, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Lazily reads tensors from a checkpoint and records every tensor name it
/// was asked for.
#[derive(Debug)]
pub struct CheckpointReader {
    path: PathBuf,
    bytes: Vec<u8>,
    meta: CheckpointMeta,
    trace: RefCell<Vec<String>>,
}

impl CheckpointReader {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
        SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
        let info = header
            .metadata()
            .as_ref()
            .ok_or_else(|| ckpt_err(path, "missing metadata"))?;
        match info.get("format") {
            Some(f) if f == CHECKPOINT_FORMAT => {}
            other => return Err(ckpt_err(path, format!("unsupported format {other:?}"))),
        }
        let meta: CheckpointMeta = serde_json::from_str(
            info.get("meta").ok_or_else(|| ckpt_err(path, "missing meta entry"))?,
        )
        .map_err(|e| ckpt_err(path, e))?;
        Ok(CheckpointReader {
            path: path.to_path_buf(),
            bytes,
            meta,
            trace: RefCell::new(Vec::new()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn meta(&self) -> &CheckpointMeta {
        &self.meta
    }

    fn archive(&self) -> Result<SafeTensors<'_>> {
        SafeTensors::deserialize(&self.bytes).map_err(|e| ckpt_err(&self.path, e))
    }

    pub fn names(&self) -> Result<Vec<String>> {
        let mut names: Vec<String> = self.archive()?.names().into_iter().map(str::to_string).collect();
        names.sort();
        Ok(names)
    }

    pub fn tensor(&self, name: &str, device: &Device) -> Result<Tensor> {
        self.trace.borrow_mut().push(name.to_string());
        let archive = self.archive()?;
        let view = archive
            .tensor(name)
            .map_err(|_| ckpt_err(&self.path, format!("missing tensor {name}")))?;
        Ok(view.load(device)?)
    }

    /// Tensor names read so far, in order.
    pub fn trace(&self) -> Vec<String> {
        self.trace.borrow().clone()
    }

    /// Overwrites each `params` entry with the tensor stored under
    /// `prefix.name`, checking shape and dtype.
    pub fn load_into(&self, prefix: &str, params: &[(String, &Var)]) -> Result<()> {
        for (name, var) in params {
            let key = format!("{prefix}.{name}");
            let t = self.tensor(&key, var.device())?;
            if t.dims() != var.dims() || t.dtype() != var.dtype() {
                return Err(ckpt_err(
                    &self.path,
                    format!(
                        "{key} is {:?} {:?}, expected {:?} {:?}",
                        t.dims(),
                        t.dtype(),
                        var.dims(),
                        var.dtype()
                    ),
                ));
            }
            var.set(&t)?;
        }
        Ok(())
    }

    pub fn load_optimizer(&self, optim: &mut AdamW) -> Result<()> {
        for s in optim.states.iter_mut() {
            let m = self.tensor(&format!("optim.m.{}", s.name), s.m.device())?;
            let v = self.tensor(&format!("optim.v.{}", s.name), s.v.device())?;
            if m.dims() != s.m.dims() || v.dims() != s.v.dims() || m.dtype() != s.m.dtype() {
                return Err(ckpt_err(&self.path, format!("optimizer state for {} has the wrong shape", s.name)));
            }
            s.m = m;
            s.v = v;
        }
        optim.t = self.meta.optim_t;
        Ok(())
    }
}
