//! Single-file locked-model container (`.dsm`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DSMF" | u32 format version | u64 manifest length | manifest (JSON)
//!        | u64 payload length | payload (bincode) | sha256 of all preceding bytes
//! ```
//!
//! The manifest is a human-readable summary; the payload holds the full
//! model with fixed-width little-endian integers and IEEE-754 floats.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::stack::{LockedModel, FORMAT_VERSION};

pub const MAGIC: &[u8; 4] = b"DSMF";

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("not a durastack model file")]
    BadMagic,
    #[error("model format version {found} is not supported (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt model artifact: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot serialise model: {0}")]
    Encode(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub schema_version: u32,
    pub encoding_fingerprint: String,
    pub features: Vec<String>,
    pub pipelines: usize,
    pub stack_weights: Vec<Vec<f64>>,
    pub selected: Vec<Vec<String>>,
    pub base_seed: u64,
    pub m: usize,
    pub iterations: usize,
    pub tune_digest: String,
    pub development_rows: usize,
    pub clusters: Vec<String>,
    pub created_at: String,
    pub payload_sha256: String,
}

fn bincode_config() -> impl bincode::config::Config {
    bincode::config::standard().with_little_endian().with_fixed_int_encoding()
}

pub fn manifest_of(model: &LockedModel, payload_sha256: String) -> Manifest {
    let p = &model.provenance;
    Manifest {
        format_version: model.format_version,
        schema_version: model.meta.schema_version,
        encoding_fingerprint: model.meta.fingerprint(),
        features: model.meta.feature_names().into_iter().map(String::from).collect(),
        pipelines: model.pipelines.len(),
        stack_weights: model.pipelines.iter().map(|pl| pl.weights.w.clone()).collect(),
        selected: p.selected.clone(),
        base_seed: p.base_seed,
        m: p.m,
        iterations: p.iterations,
        tune_digest: p.tune_digest.clone(),
        development_rows: p.development_rows,
        clusters: p.clusters.clone(),
        created_at: p.created_at.clone(),
        payload_sha256,
    }
}

pub fn to_bytes(model: &LockedModel) -> Result<Vec<u8>, ArtifactError> {
    let payload = bincode::serde::encode_to_vec(model, bincode_config()).map_err(|e| ArtifactError::Encode(e.to_string()))?;
    let manifest = manifest_of(model, hex::encode(Sha256::digest(&payload)));
    let manifest = serde_json::to_vec_pretty(&manifest).map_err(|e| ArtifactError::Encode(e.to_string()))?;
    let mut out = Vec::with_capacity(payload.len() + manifest.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&model.format_version.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ArtifactError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| ArtifactError::Corrupt(format!("truncated {what}")))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<usize, ArtifactError> {
        let b = self.take(8, what)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("8 bytes"))).map_err(|_| ArtifactError::Corrupt(format!("{what} too large")))
    }
}

/// Parses the container and returns its manifest and model. Nothing is
/// returned unless every check passes.
pub fn from_bytes(bytes: &[u8]) -> Result<(Manifest, LockedModel), ArtifactError> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4, "header").map_err(|_| ArtifactError::BadMagic)? != MAGIC {
        return Err(ArtifactError::BadMagic);
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ArtifactError::Version { found: version, expected: FORMAT_VERSION });
    }
    let mlen = c.u64("manifest length")?;
    let manifest_bytes = c.take(mlen, "manifest")?;
    let plen = c.u64("payload length")?;
    let payload = c.take(plen, "payload")?;
    let body_end = c.at;
    let digest = c.take(32, "digest")?;
    if c.at != bytes.len() {
        return Err(ArtifactError::Corrupt("trailing bytes after digest".into()));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
        return Err(ArtifactError::Corrupt("checksum mismatch".into()));
    }
    let manifest: Manifest = serde_json::from_slice(manifest_bytes).map_err(|e| ArtifactError::Corrupt(format!("manifest: {e}")))?;
    if manifest.payload_sha256 != hex::encode(Sha256::digest(payload)) {
        return Err(ArtifactError::Corrupt("payload digest does not match manifest".into()));
    }
    let (model, used): (LockedModel, usize) = bincode::serde::decode_from_slice(payload, bincode_config()).map_err(|e| ArtifactError::Corrupt(format!("payload: {e}")))?;
    if used != payload.len() {
        return Err(ArtifactError::Corrupt("payload has trailing bytes".into()));
    }
    if model.format_version != version || model.pipelines.is_empty() || model.pipelines.iter().any(|p| !p.weights.is_valid(1e-12)) {
        return Err(ArtifactError::Corrupt("model contents are inconsistent".into()));
    }
    Ok((manifest, model))
}

pub fn save<W: Write>(model: &LockedModel, mut out: W) -> Result<(), ArtifactError> {
    out.write_all(&to_bytes(model)?)?;
    Ok(())
}

pub fn load<R: Read>(mut input: R) -> Result<LockedModel, ArtifactError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    Ok(from_bytes(&bytes)?.1)
}

/// Writes the artifact through a temporary file and rename.
pub fn save_file(model: &LockedModel, path: &Path) -> Result<(), ArtifactError> {
    write_atomic(path, &to_bytes(model)?)?;
    Ok(())
}

pub fn load_file(path: &Path) -> Result<LockedModel, ArtifactError> {
    load(std::fs::File::open(path)?)
}
