//! Checkpoint container: JSON header plus raw little-endian f32 tensor blobs.
//!
//! Byte layout:
//! ```text
//! offset 0   : magic "MADCKPT\n" (8 bytes)
//! offset 8   : header length, u32 little-endian
//! offset 12  : UTF-8 JSON header (format_version, architecture_id,
//!              input_shape, num_classes, seed, training_meta,
//!              tensors: [{name, shape}])
//! then       : tensor blobs, f32 little-endian, concatenated in header order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{Architecture, ModelSpec, ModelState, Network};
use crate::error::{MadError, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MADCKPT\n";

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    architecture_id: Architecture,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    seed: u64,
    training_meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let net = state.network();
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        architecture_id: state.spec.architecture_id,
        input_shape: state.spec.input_shape,
        num_classes: state.spec.num_classes,
        seed: state.rng_seed,
        training_meta: state.training_meta.clone(),
        tensors: net
            .params
            .iter()
            .map(|p| TensorEntry { name: p.name.clone(), shape: p.shape.clone() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + header_bytes.len() + state.total_params() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for tensor in state.parameters() {
        for &v in tensor.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path)?;
    let fail = |msg: &str| MadError::Integrity(format!("{}: {msg}", path.display()));
    if bytes.len() < 12 || &bytes[0..8] != MAGIC {
        return Err(fail("not a checkpoint file (bad magic)"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| fail(&format!("corrupt header: {e}")))?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(MadError::Version {
            expected: CHECKPOINT_FORMAT_VERSION,
            found: header.format_version,
        });
    }
    let spec = ModelSpec::new(header.architecture_id, header.input_shape, header.num_classes);
    let net = Network::from_spec(&spec)?;
    if net.params.len() != header.tensors.len() {
        return Err(fail("tensor index does not match architecture"));
    }
    for (meta, entry) in net.params.iter().zip(&header.tensors) {
        if meta.name != entry.name || meta.shape != entry.shape {
            return Err(fail(&format!("tensor {} does not match architecture layout", entry.name)));
        }
    }
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let blob = &bytes[12 + header_len..];
    if blob.len() != total * 4 {
        return Err(fail(&format!("blob length {} != expected {}", blob.len(), total * 4)));
    }
    let mut params = Vec::with_capacity(header.tensors.len());
    let mut off = 0;
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let data: Vec<f32> = blob[off..off + len * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(
            ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| fail(&format!("tensor {}: {e}", entry.name)))?,
        );
        off += len * 4;
    }
    let mut state = super::build_model(&spec, header.seed)?;
    state.set_parameters(params)?;
    state.training_meta = header.training_meta;
    Ok(state)
}
