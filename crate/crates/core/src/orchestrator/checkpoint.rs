//! Checkpoint container: `MMGC`, version byte, u32 LE header length, JSON
//! header, then per parameter a u64 LE length and its MMGT (f64) bytes in
//! header order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Setting, Task};
use crate::dataeng::mmgt::{decode_tensor, encode_tensor};
use crate::dataeng::Dtype;
use crate::error::{Error, FormatError, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::{ParamEntry, ParamStore};

pub const MAGIC: &[u8; 4] = b"MMGC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub run_config: RunConfig,
    pub model_config: ModelConfig,
    pub setting: Setting,
    pub task: Task,
    pub seed: u64,
    /// Dataset the model was trained on, for evaluation commands.
    pub data_dir: Option<PathBuf>,
    pub names: Vec<String>,
    pub trainable: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(
        model: Model,
        run_config: RunConfig,
        setting: Setting,
        task: Task,
        seed: u64,
        data_dir: Option<PathBuf>,
    ) -> Self {
        let entries = model.params.entries();
        Checkpoint {
            header: CheckpointHeader {
                config_hash: run_config.hash(),
                run_config,
                model_config: model.config,
                setting,
                task,
                seed,
                data_dir,
                names: entries.iter().map(|e| e.name.clone()).collect(),
                trainable: entries.iter().map(|e| e.trainable).collect(),
            },
            model,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for e in self.model.params.entries() {
            let t = encode_tensor(&e.tensor, Dtype::F64)?;
            out.extend_from_slice(&(t.len() as u64).to_le_bytes());
            out.extend_from_slice(&t);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |source| Error::Format {
            path: path.to_path_buf(),
            source,
        };
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).map_err(fmt)? != MAGIC {
            return Err(fmt(FormatError::BadMagic));
        }
        let version = cur.take(1).map_err(fmt)?[0];
        if version != VERSION {
            return Err(fmt(FormatError::UnsupportedVersion(version)));
        }
        let len = u32::from_le_bytes(cur.take(4).map_err(fmt)?.try_into().unwrap()) as usize;
        let header: CheckpointHeader = serde_json::from_slice(cur.take(len).map_err(fmt)?)?;
        if header.names.len() != header.trainable.len() {
            return Err(Error::Data(format!(
                "{}: header name/flag counts differ",
                path.display()
            )));
        }
        let mut entries = Vec::with_capacity(header.names.len());
        for (name, &trainable) in header.names.iter().zip(&header.trainable) {
            let n = u64::from_le_bytes(cur.take(8).map_err(fmt)?.try_into().unwrap());
            let n = usize::try_from(n).map_err(|_| fmt(FormatError::DimsOverflow))?;
            let (tensor, _) = decode_tensor(cur.take(n).map_err(fmt)?, path)?;
            entries.push(ParamEntry {
                name: name.clone(),
                tensor,
                trainable,
            });
        }
        if cur.pos != bytes.len() {
            return Err(fmt(FormatError::TrailingBytes));
        }
        let params = ParamStore::from_entries(entries)?;
        let model = Model {
            config: header.model_config,
            params,
        };
        // shapes must match what the config would build
        let reference = Model::new(header.model_config, 0)?;
        if reference.params.len() != model.params.len()
            || reference
                .params
                .entries()
                .iter()
                .zip(model.params.entries())
                .any(|(a, b)| a.name != b.name || a.tensor.dims() != b.tensor.dims())
        {
            return Err(Error::Data(format!(
                "{}: parameters do not match the model config",
                path.display()
            )));
        }
        Ok(Checkpoint { header, model })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::DimsOverflow)?;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
}
