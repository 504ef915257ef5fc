//! Binary model container.
//!
//! ```text
//! magic   "AMPX"                      4 bytes
//! version u32 LE                      4 bytes
//! hlen    u32 LE                      4 bytes
//! header  JSON (config, labels, vocab, parameter count)
//! params  f64 LE, tensors in `Parameters::tensors` order
//! sha256  over every preceding byte   32 bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::model::{ProxyConfig, ProxyModel};
use super::vocab::Vocab;
use super::ProxyError;
use crate::corpus::LabelSet;

const MAGIC: &[u8; 4] = b"AMPX";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ProxyConfig,
    labels: LabelSet,
    vocab: Vocab,
    param_count: usize,
}

pub fn to_bytes(model: &ProxyModel) -> Vec<u8> {
    let header = Header {
        config: model.config,
        labels: model.labels.clone(),
        vocab: model.vocab.clone(),
        param_count: model.params.len(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 8 * model.params.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in model.params.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<ProxyModel, ProxyError> {
    if bytes.len() < 12 + DIGEST_LEN || &bytes[..4] != MAGIC {
        return Err(ProxyError::ChecksumMismatch);
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(ProxyError::ChecksumMismatch);
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(ProxyError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = u32::from_le_bytes(body[8..12].try_into().unwrap()) as usize;
    let header_end = 12 + hlen;
    if body.len() < header_end {
        return Err(ProxyError::Format("header overruns file".into()));
    }
    let header: Header = serde_json::from_slice(&body[12..header_end])
        .map_err(|e| ProxyError::Format(e.to_string()))?;

    let mut model = ProxyModel::new(header.config, header.vocab, header.labels, 0)?;
    if model.params.len() != header.param_count {
        return Err(ProxyError::Format("parameter count disagrees with config".into()));
    }
    let blob = &body[header_end..];
    if blob.len() != 8 * header.param_count {
        return Err(ProxyError::Format("parameter blob has wrong length".into()));
    }
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for t in model.params.tensors_mut() {
        for x in t.iter_mut() {
            *x = values.next().expect("length checked");
        }
    }
    if !model.params.all_finite() {
        return Err(ProxyError::Format("non-finite parameter".into()));
    }
    Ok(model)
}

pub fn save_model(model: &ProxyModel, path: impl AsRef<Path>) -> Result<(), ProxyError> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ProxyModel, ProxyError> {
    from_bytes(&std::fs::read(path)?)
}
