//! Raw tensor snapshots.
//!
//! Layout: the 8-byte magic `ASGM0001`, four little-endian `u32`
//! (channels, height, width, dtype), then the payload in channel-major,
//! row-major order. dtype 0 stores little-endian `f32`; dtype 1 stores
//! little-endian `f64` and is used where bit-exact parameters matter
//! (checkpoints, prior laws).

use super::{Field, Shape};
use crate::error::{Error, Result};
use std::path::Path;

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"ASGM0001";
const HEADER_LEN: usize = 8 + 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnapshotDtype {
    F32 = 0,
    F64 = 1,
}

impl SnapshotDtype {
    fn width(self) -> usize {
        match self {
            SnapshotDtype::F32 => 4,
            SnapshotDtype::F64 => 8,
        }
    }
}

/// Writes `field` as 32-bit floats.
pub fn save_snapshot(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    save_snapshot_as(field, path, SnapshotDtype::F32)
}

pub fn save_snapshot_as(field: &Field, path: impl AsRef<Path>, dtype: SnapshotDtype) -> Result<()> {
    std::fs::write(path, encode(field, dtype))?;
    Ok(())
}

pub fn load_snapshot(path: impl AsRef<Path>) -> Result<Field> {
    decode(&std::fs::read(path)?)
}

pub(crate) fn encode(field: &Field, dtype: SnapshotDtype) -> Vec<u8> {
    let shape = field.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + shape.len() * dtype.width());
    out.extend_from_slice(SNAPSHOT_MAGIC);
    for v in [shape.channels, shape.height, shape.width, dtype as usize] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    match dtype {
        SnapshotDtype::F32 => {
            for &v in field.values() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        SnapshotDtype::F64 => {
            for &v in field.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Field> {
    if bytes.len() < 8 || &bytes[..8] != SNAPSHOT_MAGIC {
        return Err(Error::MagicMismatch);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |k: usize| {
        let o = 8 + 4 * k;
        u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
    };
    let shape = Shape::new(word(0), word(1), word(2));
    let dtype = match word(3) {
        0 => SnapshotDtype::F32,
        1 => SnapshotDtype::F64,
        other => {
            return Err(Error::InvalidArgument(format!("unknown snapshot dtype {other}")))
        }
    };
    let payload = &bytes[HEADER_LEN..];
    let expected = shape.len() * dtype.width();
    if payload.len() != expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let values = match dtype {
        SnapshotDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        SnapshotDtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    Field::from_vec(shape, values)
}
