//! Checkpoint files: magic, version, embedded config, tensor records.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::config::ModelConfig;
use super::net::Model;
use crate::error::{Error, Result};
use crate::tensor::serial::{read_record, Cursor};
use crate::tensor::{write_tensor_record, Real};

pub const MAGIC: &[u8; 4] = b"AGLN";
pub const VERSION: u32 = 1;

impl<T: Real> Model<T> {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config().to_kv();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.params().len() as u32).to_le_bytes());
        for (name, _, t) in self.params().iter() {
            write_tensor_record(&mut out, name, t).expect("writing to a Vec");
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes, 0);
        if cur.bytes(4, "magic")? != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                detail: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = cur.u32("version")?;
        if version != VERSION as usize {
            return Err(Error::Parse {
                offset: 4,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let len = cur.u32("config length")?;
        let at = cur.offset;
        let text = std::str::from_utf8(&cur.bytes(len, "config")?).map_err(|e| Error::Parse {
            offset: at + e.valid_up_to(),
            detail: "config block is not UTF-8".into(),
        })?
        .to_string();
        let config = ModelConfig::from_kv(&text)?;
        let mut model = Model::<T>::new(config, 0)?;
        let count = cur.u32("tensor count")?;
        if count != model.params().len() {
            return Err(Error::Data(format!(
                "checkpoint holds {count} tensors, the embedded config needs {}",
                model.params().len()
            )));
        }
        for _ in 0..count {
            let at = cur.offset;
            let (name, tensor) = read_record::<T, _>(&mut cur)?;
            let store = model.params_mut();
            let id = store.find(&name).ok_or_else(|| Error::Parse {
                offset: at,
                detail: format!("unexpected tensor `{name}`"),
            })?;
            if store.tensor(id).shape() != tensor.shape() {
                return Err(Error::Parse {
                    offset: at,
                    detail: format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        tensor.shape(),
                        store.tensor(id).shape()
                    ),
                });
            }
            store.tensor_mut(id).data_mut().copy_from_slice(tensor.data());
        }
        if cur.offset != bytes.len() {
            return Err(Error::Parse {
                offset: cur.offset,
                detail: "trailing bytes after the last tensor".into(),
            });
        }
        Ok(model)
    }

    /// Writes via a temporary file so a crash never leaves half a checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_checkpoint_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
