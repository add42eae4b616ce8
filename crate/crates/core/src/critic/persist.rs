use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Params, BLOCK_NAMES};
use super::{CriticError, CriticModel, ModelRole};
use crate::catalog::RatingScale;

pub const MODEL_MAGIC: &[u8; 8] = b"RCRITIC\0";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    role: ModelRole,
    scale: RatingScale,
    dim: usize,
    hidden: usize,
    levels: usize,
    fingerprint: String,
    log_digest: String,
    blocks: Vec<(String, usize)>,
}

/// Fingerprint check applied when loading a model.
#[derive(Debug, Clone, Default)]
pub struct LoadCheck {
    pub expected_fingerprint: Option<String>,
    pub allow_fingerprint_mismatch: bool,
}

/// Layout: magic, u32 version, u32 header length, JSON header, then each
/// parameter block as little-endian f32.
pub fn save_model(m: &CriticModel, path: &Path) -> Result<(), CriticError> {
    let header = Header {
        format_version: MODEL_FORMAT_VERSION,
        role: m.role(),
        scale: *m.scale(),
        dim: m.dim(),
        hidden: m.hidden(),
        levels: m.levels(),
        fingerprint: m.fingerprint().to_string(),
        log_digest: m.log_digest().to_string(),
        blocks: BLOCK_NAMES.iter().zip(m.params().blocks()).map(|(n, b)| (n.to_string(), b.len())).collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for block in m.params().blocks() {
        for v in block {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let io = |source| CriticError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    f.flush().map_err(io)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], CriticError> {
    if bytes.len() < n {
        return Err(CriticError::Corrupt("unexpected end of file".into()));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn read_u32(bytes: &mut &[u8]) -> Result<u32, CriticError> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().expect("4 bytes")))
}

pub fn load_model(path: &Path, check: &LoadCheck) -> Result<CriticModel, CriticError> {
    let data = fs::read(path).map_err(|source| CriticError::Io { path: path.display().to_string(), source })?;
    let mut bytes = data.as_slice();
    if take(&mut bytes, MODEL_MAGIC.len()).ok() != Some(MODEL_MAGIC.as_slice()) {
        return Err(CriticError::BadMagic);
    }
    let version = read_u32(&mut bytes)?;
    if version != MODEL_FORMAT_VERSION {
        return Err(CriticError::VersionMismatch { found: version, expected: MODEL_FORMAT_VERSION });
    }
    let header_len = read_u32(&mut bytes)? as usize;
    let header: Header = serde_json::from_slice(take(&mut bytes, header_len)?)
        .map_err(|e| CriticError::Corrupt(format!("header: {e}")))?;
    if header.format_version != version || header.levels != header.scale.levels() {
        return Err(CriticError::Corrupt("header disagrees with file layout".into()));
    }

    if let Some(expected) = &check.expected_fingerprint {
        if expected != &header.fingerprint && !check.allow_fingerprint_mismatch {
            return Err(CriticError::FingerprintMismatch {
                expected: header.fingerprint,
                actual: expected.clone(),
            });
        }
    }

    let mut params = Params::zeros(header.dim, header.hidden, header.levels);
    if header.blocks.len() != BLOCK_NAMES.len() {
        return Err(CriticError::Corrupt("wrong number of parameter blocks".into()));
    }
    for ((block, (name, len)), expected_name) in
        params.blocks_mut().into_iter().zip(&header.blocks).zip(BLOCK_NAMES)
    {
        if name != expected_name || *len != block.len() {
            return Err(CriticError::Corrupt(format!("block {name} has unexpected shape")));
        }
        let raw = take(&mut bytes, len * 4)?;
        for (dst, chunk) in block.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f64::from(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
        }
    }
    if !bytes.is_empty() {
        return Err(CriticError::Corrupt("trailing bytes after parameters".into()));
    }

    let mut model = CriticModel::from_params(header.scale, header.dim, header.hidden, header.fingerprint, params);
    model.set_role(header.role);
    model.set_log_digest(header.log_digest);
    Ok(model)
}
