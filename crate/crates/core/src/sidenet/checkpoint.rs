//! Versioned binary checkpoint of a ladder stack.
//!
//! ```text
//! "GLCK"  u16 version (1)
//! [u8; 32]            sha256 of the config text
//! u32 L, u32 D, u32 count, u32 * count    backbone signature
//! u32 num_classes
//! u32 len, bytes      canonical config text (UTF-8)
//! u32 params, then per parameter:
//!     u16 len, name bytes, u32 rows, u32 cols, u8 trainable, f64 * rows * cols
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::autodiff::ParamStore;
use crate::backbone::{BackboneSignature, InsertionSchedule};
use crate::error::{Error, Result};

use super::{GLadderStack, LadderConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub signature: BackboneSignature,
    pub num_classes: usize,
    pub config_text: String,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_stack(stack: &GLadderStack, signature: BackboneSignature, config_text: impl Into<String>) -> Self {
        Self {
            signature,
            num_classes: stack.num_classes(),
            config_text: config_text.into(),
            params: stack.params().clone(),
        }
    }

    pub fn config_hash(&self) -> [u8; 32] {
        Sha256::digest(self.config_text.as_bytes()).into()
    }

    /// Refuses a backbone whose `L`, `D` or inserted layers differ.
    pub fn check_signature(&self, backbone: &BackboneSignature) -> Result<()> {
        if &self.signature != backbone {
            return Err(Error::SignatureMismatch(format!(
                "checkpoint expects L={} D={} layers={:?}, backbone has L={} D={} layers={:?}",
                self.signature.num_layers,
                self.signature.model_dim,
                self.signature.inserted_layers,
                backbone.num_layers,
                backbone.model_dim,
                backbone.inserted_layers
            )));
        }
        Ok(())
    }

    /// Rebuilds the stack with `cfg` (which must match the saved layout)
    /// and restores every parameter value.
    pub fn restore(&self, cfg: LadderConfig, backbone: &BackboneSignature) -> Result<GLadderStack> {
        self.check_signature(backbone)?;
        let schedule = InsertionSchedule::new(self.signature.inserted_layers.clone(), self.signature.num_layers)?;
        let mut stack = GLadderStack::new(schedule, self.signature.model_dim, self.num_classes, cfg)?;
        stack
            .params_mut()
            .copy_values_from(&self.params)
            .map_err(|e| Error::CheckpointCorrupt(format!("parameters do not fit the configured stack: {e}")))?;
        Ok(stack)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash());
        let sig = &self.signature;
        for v in [sig.num_layers, sig.model_dim, sig.inserted_layers.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for &l in &sig.inserted_layers {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (_, p) in self.params.iter() {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.ncols() as u32).to_le_bytes());
            out.push(u8::from(p.trainable));
            for v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::CheckpointCorrupt("bad magic, not a GLCK file".into()));
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointCorrupt(format!("unsupported version {version}")));
        }
        let hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let num_layers = r.u32()? as usize;
        let model_dim = r.u32()? as usize;
        let count = r.u32()? as usize;
        let inserted_layers = (0..count).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let num_classes = r.u32()? as usize;
        let text_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(text_len)?.to_vec())
            .map_err(|_| Error::CheckpointCorrupt("config text is not UTF-8".into()))?;
        let n_params = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::CheckpointCorrupt("parameter name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let trainable = r.take(1)?[0] != 0;
            let raw = r.take(rows * cols * 8)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Array2::from_shape_vec((rows, cols), values).expect("length checked");
            params
                .register(name, value, trainable)
                .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointCorrupt("trailing bytes".into()));
        }
        let ckpt = Self {
            signature: BackboneSignature {
                num_layers,
                model_dim,
                inserted_layers,
            },
            num_classes,
            config_text,
            params,
        };
        if ckpt.config_hash() != hash {
            return Err(Error::CheckpointCorrupt("config hash does not match config text".into()));
        }
        Ok(ckpt)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CheckpointCorrupt("truncated file".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
