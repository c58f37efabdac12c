//! OVOL: a minimal bit-exact volume container.
//!
//! Layout: `b"OVOL"`, version `u8 = 1`, `nz ny nx` as little-endian `u32`,
//! dtype `u8 = 1` (f32 LE), then `nz*ny*nx` floats in z, y, x order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

pub const MAGIC: &[u8; 4] = b"OVOL";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 12 + 1;

/// Metadata written next to each volume as `<name>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub subject: String,
    pub contrast: String,
    pub scale_max: f32,
    pub seed: Option<u64>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode(v: &Volume) -> Result<Vec<u8>> {
    let d = v.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * d.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for n in [d.nz, d.ny, d.nx] {
        let n = u32::try_from(n)
            .map_err(|_| Error::InvalidVolume(format!("extent {n} does not fit in u32")))?;
        out.extend_from_slice(&n.to_le_bytes());
    }
    out.push(DTYPE_F32);
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "truncated header: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
    let dims = Dims::new(dim(0), dim(1), dim(2));
    if bytes[17] != DTYPE_F32 {
        return Err(Error::Format(format!("unknown dtype {}", bytes[17])));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = dims.nz.checked_mul(dims.ny).and_then(|n| n.checked_mul(dims.nx));
    if expected.and_then(|n| n.checked_mul(4)) != Some(payload.len()) {
        return Err(Error::Format(format!(
            "payload length {} bytes does not match dims {dims}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new(dims, data)
}

/// Writes `v` to `path` and, if given, the sidecar next to it.
pub fn write_volume(path: &Path, v: &Volume, sidecar: Option<&Sidecar>) -> Result<()> {
    std::fs::write(path, encode(v)?).map_err(|e| Error::io(path, e))?;
    if let Some(s) = sidecar {
        let p = sidecar_path(path);
        let json = serde_json::to_string_pretty(s)?;
        std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads the sidecar of `path` if one exists.
pub fn read_sidecar(path: &Path) -> Result<Option<Sidecar>> {
    let p = sidecar_path(path);
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}
