//! Checkpoint file: `SSLCKPT1`, a little-endian `u64` header length, a JSON
//! header, then the raw little-endian tensor payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::BackboneConfig;
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::simsiam::SiameseConfig;
use crate::tensor::{DType, ParamStore, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSLCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Siamese { siamese: SiameseConfig },
    Classifier { outputs: usize, multi_label: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub model: ModelKind,
    pub normalization: Option<Normalization>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub trainable: bool,
}

impl TensorEntry {
    fn byte_len(&self) -> u64 {
        (self.shape.iter().product::<usize>() * self.dtype.size_of()) as u64
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub entries: Vec<TensorEntry>,
    payload: Vec<u8>,
    path: PathBuf,
}

/// Serializes every tensor of `store`; written to a temporary file then renamed.
pub fn save_checkpoint<T: Scalar>(path: &Path, meta: &CheckpointMeta, store: &ParamStore<T>) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for id in store.ids() {
        let t = store.get(id);
        tensors.push(TensorEntry {
            name: store.name(id).to_string(),
            dtype: t.dtype(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            trainable: store.is_trainable(id),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors,
    })
    .map_err(|e| Error::format(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(bytes, path)
}

impl Checkpoint {
    pub fn from_bytes(bytes: Vec<u8>, path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "missing SSLCKPT1 magic"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Corruption(format!("header of {header_len} bytes runs past the file end")))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| Error::Corruption(format!("unreadable header: {e}")))?;
        let payload = bytes[header_end..].to_vec();

        let mut spans: Vec<(u64, u64, &str)> = header
            .tensors
            .iter()
            .map(|e| (e.offset, e.offset + e.byte_len(), e.name.as_str()))
            .collect();
        spans.sort_unstable();
        let mut cursor = 0u64;
        for (start, end, name) in &spans {
            if *start != cursor {
                return Err(Error::Corruption(format!(
                    "tensor {name} starts at {start}, expected {cursor} (gap or overlap)"
                )));
            }
            cursor = *end;
        }
        if cursor != payload.len() as u64 {
            return Err(Error::Corruption(format!(
                "manifest covers {cursor} payload bytes, file holds {}",
                payload.len()
            )));
        }
        Ok(Checkpoint {
            meta: header.meta,
            entries: header.tensors,
            payload,
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Tensor `name`, converted to `T` when stored at another precision.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let entry = self
            .entry(name)
            .ok_or_else(|| Error::Incompatible(format!("checkpoint has no tensor {name}")))?;
        let size = entry.dtype.size_of();
        let start = entry.offset as usize;
        let bytes = &self.payload[start..start + entry.byte_len() as usize];
        let data: Vec<T> = match entry.dtype {
            DType::F32 => bytes.chunks(size).map(|b| T::lit(f64::from(f32::read_le(b)))).collect(),
            DType::F64 => bytes.chunks(size).map(|b| T::lit(f64::read_le(b))).collect(),
        };
        Tensor::new(&entry.shape, data)
    }

    /// Family check; shapes are checked tensor by tensor on restore.
    pub fn check_backbone(&self, config: &BackboneConfig) -> Result<()> {
        if self.meta.backbone.family != config.family {
            return Err(Error::Incompatible(format!(
                "checkpoint {} holds a {} backbone, config asks for {}",
                self.path.display(),
                self.meta.backbone.family.name(),
                config.family.name()
            )));
        }
        Ok(())
    }

    /// Copies every store tensor whose name starts with `prefix`. Returns the count.
    pub fn restore_into<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str) -> Result<usize> {
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
        for &id in &ids {
            let name = store.name(id).to_string();
            let saved = self.tensor::<T>(&name)?;
            let target = store.get_mut(id);
            if saved.shape() != target.shape() {
                return Err(Error::Incompatible(format!(
                    "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                    saved.shape(),
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(saved.data());
        }
        Ok(ids.len())
    }
}
