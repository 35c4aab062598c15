//! `.fseq` feature files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "FSEQ"            4 bytes
//! version   u32     currently 1
//! frames    u32     S >= 1
//! dims      u32     D >= 1
//! payload   f32     S*D values, row-major
//! ```
//!
//! Labels and ids live in a JSON sidecar `<name>.json` next to the payload.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::VideoRecord;
use crate::{Error, Result};

pub const FSEQ_MAGIC: [u8; 4] = *b"FSEQ";
pub const FSEQ_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    id: String,
    phase_labels: Option<Vec<usize>>,
    action_label: Option<u32>,
}

pub fn encode_fseq(features: &Array2<f32>) -> Vec<u8> {
    let (s, d) = features.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * s * d);
    out.extend_from_slice(&FSEQ_MAGIC);
    out.extend_from_slice(&FSEQ_VERSION.to_le_bytes());
    out.extend_from_slice(&(s as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for v in features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_fseq(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            "header",
            format!("{} bytes, header needs {HEADER_LEN}", bytes.len()),
        ));
    }
    if bytes[..4] != FSEQ_MAGIC {
        return Err(Error::format("magic", format!("expected \"FSEQ\", found {:?}", &bytes[..4])));
    }
    let version = read_u32(bytes, 4);
    if version != FSEQ_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let s = read_u32(bytes, 8) as usize;
    let d = read_u32(bytes, 12) as usize;
    if s == 0 {
        return Err(Error::format("frames", "S must be at least 1"));
    }
    if d == 0 {
        return Err(Error::format("dims", "D must be at least 1"));
    }
    let expected = s
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format("dims", "S*D overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::format(
            "payload",
            format!("truncated: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            "payload",
            format!("{} trailing bytes after {expected}", payload.len() - expected),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("payload", "non-finite feature value"));
    }
    Ok(Array2::from_shape_vec((s, d), values).expect("length checked above"))
}

/// `clip.fseq` -> `clip.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the binary payload to `path` and the sidecar next to it.
pub fn save_features(record: &VideoRecord, path: &Path) -> Result<()> {
    record.validate()?;
    fs::write(path, encode_fseq(&record.features)).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        id: record.id.clone(),
        phase_labels: record.phase_labels.clone(),
        action_label: record.action_label,
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string(&sidecar).map_err(|e| Error::Internal(e.to_string()))?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

/// Loads a record. A missing sidecar yields an unlabeled record whose id is
/// the file stem.
pub fn load_features(path: &Path) -> Result<VideoRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let features = decode_fseq(&bytes)?;
    let side = sidecar_path(path);
    let sidecar = match fs::read_to_string(&side) {
        Ok(text) => serde_json::from_str::<Sidecar>(&text)
            .map_err(|e| Error::format("sidecar", e.to_string()))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Sidecar {
            id: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            phase_labels: None,
            action_label: None,
        },
        Err(e) => return Err(Error::io(&side, e)),
    };
    if let Some(labels) = &sidecar.phase_labels {
        if labels.len() != features.nrows() {
            return Err(Error::format(
                "phase_labels",
                format!("{} labels for {} frames", labels.len(), features.nrows()),
            ));
        }
    }
    Ok(VideoRecord {
        id: sidecar.id,
        features,
        phase_labels: sidecar.phase_labels,
        action_label: sidecar.action_label,
        padded_frames: 0,
    })
}
