//! Checkpoint container: magic "OCTM", version, a human-readable JSON
//! header (model configuration plus the ordered tensor manifest), raw
//! little-endian f32 payload in manifest order, and a trailing CRC32 of the
//! payload. Round trips are bitwise lossless.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{init_params, ModelConfig, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"OCTM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    tensors: Vec<ManifestEntry>,
}

/// Serialize the store (all entries, trainable and running statistics) and
/// the model configuration needed to rebuild it.
pub fn save_checkpoint(path: &Path, store: &ParamStore<f32>, model: &ModelConfig) -> Result<()> {
    let header = Header {
        model: model.clone(),
        tensors: store
            .entries()
            .iter()
            .map(|e| ManifestEntry {
                name: e.name.clone(),
                dtype: "f32".into(),
                shape: e.value.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let payload_len: usize = store.entries().iter().map(|e| 4 * e.value.numel()).sum();
    let mut payload = Vec::with_capacity(payload_len);
    for e in store.entries() {
        for &v in e.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);

    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u32).to_le_bytes())?;
    f.write_all(&header_json)?;
    f.write_all(&payload)?;
    f.write_all(&crc.to_le_bytes())?;
    Ok(())
}

/// Load a checkpoint: verify magic, version, and payload CRC, rebuild the
/// parameter store from the embedded model configuration, and restore every
/// tensor bitwise in manifest order.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore<f32>, ModelConfig)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an OCTM checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + header_len;
    if bytes.len() < header_end + 4 {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..header_end])
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;

    let payload_len: usize = header
        .tensors
        .iter()
        .map(|e| 4 * e.shape.iter().product::<usize>())
        .sum();
    let payload_end = header_end + payload_len;
    if bytes.len() < payload_end + 4 {
        return Err(Error::Checkpoint(format!(
            "truncated payload: need {} bytes",
            payload_len
        )));
    }
    let payload = &bytes[header_end..payload_end];
    let stored_crc = u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap());
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(Error::Checkpoint(format!(
            "payload CRC mismatch: computed {crc:#010x}, stored {stored_crc:#010x}"
        )));
    }

    let mut store = init_params::<f32>(&header.model)?;
    if store.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, architecture has {}",
            header.tensors.len(),
            store.len()
        )));
    }
    let mut off = 0usize;
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!(
                "tensor {} has unsupported dtype {}",
                entry.name, entry.dtype
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let b = &payload[off + 4 * i..off + 4 * i + 4];
            data.push(f32::from_le_bytes(b.try_into().unwrap()));
        }
        off += 4 * numel;
        let t = Tensor::new(entry.shape.clone(), data)?;
        store
            .set_value(&entry.name, t)
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
    }
    Ok((store, header.model))
}
