//! Single-file checkpoint: magic, little-endian header length, JSON header
//! (config, dtype, tensor names and shapes), then raw little-endian data in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GENATT\x00\x01";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    config: ModelConfig,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

pub fn write_checkpoint<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let header = Header {
        dtype: T::DTYPE.to_string(),
        config: model.config.clone(),
        tensors: model
            .params
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Schema(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + model.params.num_scalars() * T::BYTES);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.params.iter() {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Decodes a checkpoint and checks it against a freshly initialized model of
/// the stored config (same names and shapes) and the requested dtype.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Schema("not a checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Schema("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Schema(format!("bad header: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::Schema(format!(
            "checkpoint holds {} values, requested {}",
            header.dtype,
            T::DTYPE
        )));
    }
    let reference = Model::<T>::init(header.config.clone())?;
    let expected: Vec<(&String, &[usize])> = reference.params.iter().map(|(k, v)| (k, v.shape())).collect();
    let stored: Vec<(&String, &[usize])> = header.tensors.iter().map(|e| (&e.name, e.shape.as_slice())).collect();
    if expected != stored {
        return Err(Error::Schema(
            "tensor names or shapes do not match the stored config".into(),
        ));
    }
    let mut params = ParamStore::new();
    let mut offset = 16 + len;
    for e in header.tensors {
        let count: usize = e.shape.iter().product();
        let end = offset + count * T::BYTES;
        let raw = bytes
            .get(offset..end)
            .ok_or_else(|| Error::Schema(format!("truncated data for {}", e.name)))?;
        let data = raw.chunks(T::BYTES).map(T::read_le).collect();
        params.insert(e.name, Tensor::new(e.shape, data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Schema(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Model::from_parts(header.config, params)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
