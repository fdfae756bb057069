//! Versioned on-disk model format.
//!
//! Layout: magic `STYB`, format version (u32 LE), header length (u64 LE),
//! JSON header (config, digests, named tensor index, optimizer summary,
//! payload digest), then raw little-endian f64 tensor payloads in index
//! order. Optimizer moments, when present, follow the model parameters.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{FeatureKind, FusionEmbedderConfig, StyleBertModel};
use crate::optim::{AdamWParams, OptimizerState};
use crate::tensor::Tensor;
use crate::util::sha256_hex;

const MAGIC: &[u8; 4] = b"STYB";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (supported: {VERSION})")]
    Version { found: u32 },
    #[error("truncated checkpoint: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint payload digest mismatch (file corrupted or tampered)")]
    DigestMismatch,
    #[error("tensor {name}: expected shape {expected:?}, checkpoint has {found:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint tensor list does not match config: expected {expected}, found {found}")]
    TensorList { expected: String, found: String },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    params: AdamWParams,
    step: u64,
    /// Byte offset of the interleaved (m, v) moment payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: FusionEmbedderConfig,
    vocab_size: usize,
    /// Ordered so the serialized header is byte-stable across runs.
    alphabet_sizes: BTreeMap<FeatureKind, usize>,
    vocab_digest: String,
    alphabets_digest: String,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    payload_sha256: String,
}

/// A loaded checkpoint: the model plus, when it was saved mid-training,
/// the optimizer state needed for bit-exact resumption.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: StyleBertModel,
    pub optimizer: Option<OptimizerState>,
}

fn tensor_bytes(t: &Tensor, out: &mut Vec<u8>) {
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn tensor_from_bytes(shape: &[usize], bytes: &[u8]) -> Tensor {
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn save_checkpoint(
    path: &Path,
    model: &StyleBertModel,
    optimizer: Option<&OptimizerState>,
) -> Result<(), CheckpointError> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(model.params().len());
    for (name, t) in model.param_names().iter().zip(model.params()) {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        tensor_bytes(t, &mut payload);
    }
    let optimizer_header = optimizer.map(|st| {
        let offset = payload.len();
        for (m, v) in st.moments() {
            tensor_bytes(m, &mut payload);
            tensor_bytes(v, &mut payload);
        }
        OptimizerHeader { params: st.params.clone(), step: st.step, offset }
    });
    let header = Header {
        config: model.config.clone(),
        vocab_size: model.vocab_size,
        alphabet_sizes: model.alphabet_sizes.iter().map(|(&k, &v)| (k, v)).collect(),
        vocab_digest: model.vocab_digest.clone(),
        alphabets_digest: model.alphabets_digest.clone(),
        tensors,
        optimizer: optimizer_header,
        payload_sha256: sha256_hex(&payload),
    };
    let header_json = serde_json::to_vec(&header)?;

    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    let write = |file: &mut std::fs::File, bytes: &[u8]| {
        file.write_all(bytes)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    };
    write(&mut file, MAGIC)?;
    write(&mut file, &VERSION.to_le_bytes())?;
    write(&mut file, &(header_json.len() as u64).to_le_bytes())?;
    write(&mut file, &header_json)?;
    write(&mut file, &payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;

    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated { expected: 16, found: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + header_len {
        return Err(CheckpointError::Truncated {
            expected: 16 + header_len,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
    let payload = &bytes[16 + header_len..];

    // model tensors once, plus an (m, v) moment pair each when resuming
    let model_len: usize =
        header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 8).sum();
    let expected_len =
        model_len + if header.optimizer.is_some() { 2 * model_len } else { 0 };
    if payload.len() < expected_len {
        return Err(CheckpointError::Truncated {
            expected: 16 + header_len + expected_len,
            found: bytes.len(),
        });
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(CheckpointError::DigestMismatch);
    }

    let alphabet_sizes: std::collections::HashMap<FeatureKind, usize> =
        header.alphabet_sizes.iter().map(|(&k, &v)| (k, v)).collect();

    // the tensor list must agree with what the config implies
    let specs =
        StyleBertModel::expected_specs(&header.config, header.vocab_size, &alphabet_sizes);
    if specs.len() != header.tensors.len() {
        return Err(CheckpointError::TensorList {
            expected: format!("{} tensors", specs.len()),
            found: format!("{} tensors", header.tensors.len()),
        });
    }
    for ((name, shape), entry) in specs.iter().zip(&header.tensors) {
        if name != &entry.name {
            return Err(CheckpointError::TensorList {
                expected: name.clone(),
                found: entry.name.clone(),
            });
        }
        if shape != &entry.shape {
            return Err(CheckpointError::TensorShape {
                name: name.clone(),
                expected: shape.clone(),
                found: entry.shape.clone(),
            });
        }
    }

    let mut named = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let len = entry.shape.iter().product::<usize>() * 8;
        named.push((
            entry.name.clone(),
            tensor_from_bytes(&entry.shape, &payload[entry.offset..entry.offset + len]),
        ));
    }
    let shapes: Vec<Vec<usize>> = named.iter().map(|(_, t)| t.shape().to_vec()).collect();

    let optimizer = match &header.optimizer {
        None => None,
        Some(oh) => {
            let mut st = OptimizerState::new(oh.params.clone(), &shapes);
            st.step = oh.step;
            let mut off = oh.offset;
            for (m, v) in st.moments_mut().iter_mut() {
                let len = m.size() * 8;
                *m = tensor_from_bytes(&m.shape().to_vec(), &payload[off..off + len]);
                off += len;
                *v = tensor_from_bytes(&v.shape().to_vec(), &payload[off..off + len]);
                off += len;
            }
            Some(st)
        }
    };

    let model = StyleBertModel::from_parts(
        header.config,
        header.vocab_size,
        alphabet_sizes,
        header.vocab_digest,
        header.alphabets_digest,
        named,
    );
    Ok(Checkpoint { model, optimizer })
}
