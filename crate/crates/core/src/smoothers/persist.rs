//! Versioned model artifacts.
//!
//! Byte layout (integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `CVSM`                            |
//! | 4      | 2    | format version                          |
//! | 6      | 1    | family code (1 linear, 2 NW, 3 KRR, 4 MLP) |
//! | 7      | 1    | reserved, 0                             |
//! | 8      | 4    | input dimension `d`                     |
//! | 12     | 8    | sample size `m`                         |
//! | 20     | 4    | length `h` of the hyperparameter JSON   |
//! | 24     | h    | hyperparameter JSON                     |
//! | 24+h   | 8    | payload length `p`                      |
//! | 32+h   | 32   | SHA-256 of the payload                  |
//! | 64+h   | p    | payload: the full model as JSON         |
//!
//! Floats in the payload are written with shortest round-trip formatting, so
//! a loaded model evaluates bit-identically.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Family, SurfaceModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVSM";
pub const ARTIFACT_VERSION: u16 = 1;

/// Serializes a model into the artifact format.
pub fn save_model(model: &SurfaceModel) -> Result<Vec<u8>> {
    let hyper = serde_json::to_vec(&model.meta.hyperparameters).map_err(|e| Error::Io(e.to_string()))?;
    let payload = serde_json::to_vec(model).map_err(|e| Error::Io(e.to_string()))?;
    let mut out = Vec::with_capacity(64 + hyper.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
    out.push(model.family.code());
    out.push(0);
    out.extend_from_slice(&(model.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(model.meta.sample_size as u64).to_le_bytes());
    out.extend_from_slice(&(hyper.len() as u32).to_le_bytes());
    out.extend_from_slice(&hyper);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(Sha256::digest(&payload).as_slice());
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptArtifact(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses and verifies an artifact.
pub fn load_model(bytes: &[u8]) -> Result<SurfaceModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::CorruptArtifact("bad magic".into()));
    }
    let version = r.u16("version")?;
    if version != ARTIFACT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: ARTIFACT_VERSION,
        });
    }
    let code = r.take(1, "family")?[0];
    let family = Family::from_code(code).ok_or_else(|| Error::CorruptArtifact(format!("unknown family code {code}")))?;
    r.take(1, "reserved byte")?;
    let d = r.u32("dimension")? as usize;
    let m = r.u64("sample size")? as usize;
    let hyper_len = r.u32("hyperparameter length")? as usize;
    let hyper = r.take(hyper_len, "hyperparameters")?;
    let payload_len = r.u64("payload length")?;
    let digest = r.take(32, "checksum")?;
    let payload = r.take(
        usize::try_from(payload_len).map_err(|_| Error::CorruptArtifact("payload length overflow".into()))?,
        "payload",
    )?;
    if r.pos != bytes.len() {
        return Err(Error::CorruptArtifact("trailing bytes after payload".into()));
    }
    if Sha256::digest(payload).as_slice() != digest {
        return Err(Error::CorruptArtifact("payload checksum mismatch".into()));
    }
    let model: SurfaceModel =
        serde_json::from_slice(payload).map_err(|e| Error::CorruptArtifact(format!("payload: {e}")))?;
    let hyper: serde_json::Value =
        serde_json::from_slice(hyper).map_err(|e| Error::CorruptArtifact(format!("hyperparameters: {e}")))?;
    if model.family != family || model.dim() != d || model.meta.sample_size != m || model.meta.hyperparameters != hyper {
        return Err(Error::CorruptArtifact("header disagrees with payload".into()));
    }
    Ok(model)
}

pub fn save_model_file(model: &SurfaceModel, path: &Path) -> Result<()> {
    std::fs::write(path, save_model(model)?)?;
    Ok(())
}

pub fn load_model_file(path: &Path) -> Result<SurfaceModel> {
    load_model(&std::fs::read(path)?)
}
