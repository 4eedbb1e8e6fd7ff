//! FRV1 raw container.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "FRV1"
//!      4     4  payload kind (u32): 0 intensity, 1 label, 2 displacement
//!      8    12  nx, ny, nz (u32 each)
//!     20     4  channel count (u32): 1 for scalar volumes, 3 for displacement
//!     24     4  reserved, written as 0
//!     28     -  channel-major payload, little-endian; f32 for intensity and
//!               displacement, i32 for labels
//! ```

use super::{Dims, DisplacementField, Volume, VolumeKind};
use crate::error::{Error, Result};

pub const FRV_MAGIC: &[u8; 4] = b"FRV1";
pub const FRV_HEADER_LEN: usize = 28;

const KIND_INTENSITY: u32 = 0;
const KIND_LABEL: u32 = 1;
const KIND_DISPLACEMENT: u32 = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum FrvPayload {
    Volume(Volume),
    Field(DisplacementField),
}

pub fn write_frv(payload: &FrvPayload) -> Vec<u8> {
    let (kind, dims, channels) = match payload {
        FrvPayload::Volume(v) => {
            let k = match v.kind() {
                VolumeKind::Intensity => KIND_INTENSITY,
                VolumeKind::Label => KIND_LABEL,
            };
            (k, v.dims(), 1u32)
        }
        FrvPayload::Field(f) => (KIND_DISPLACEMENT, f.dims(), 3u32),
    };
    let mut out = Vec::with_capacity(FRV_HEADER_LEN + 4 * channels as usize * dims.len());
    out.extend_from_slice(FRV_MAGIC);
    for word in [
        kind,
        dims.nx as u32,
        dims.ny as u32,
        dims.nz as u32,
        channels,
        0,
    ] {
        out.extend_from_slice(&word.to_le_bytes());
    }
    match payload {
        FrvPayload::Volume(v) if v.kind() == VolumeKind::Label => {
            for &x in v.data() {
                out.extend_from_slice(&(x as i32).to_le_bytes());
            }
        }
        FrvPayload::Volume(v) => {
            for &x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        FrvPayload::Field(f) => {
            for &x in f.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

fn word(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn read_frv(bytes: &[u8]) -> Result<FrvPayload> {
    if bytes.len() < FRV_HEADER_LEN || &bytes[..4] != FRV_MAGIC {
        return Err(Error::BadMagic("not an FRV1 container".into()));
    }
    let kind = word(bytes, 4);
    let dims = Dims::new(
        word(bytes, 8) as usize,
        word(bytes, 12) as usize,
        word(bytes, 16) as usize,
    );
    let channels = word(bytes, 20) as usize;
    let want_channels = match kind {
        KIND_INTENSITY | KIND_LABEL => 1,
        KIND_DISPLACEMENT => 3,
        other => return Err(Error::UnsupportedKind(format!("FRV1 payload kind {other}"))),
    };
    if channels != want_channels {
        return Err(Error::BadMagic(format!(
            "channel count {channels} does not match payload kind {kind}"
        )));
    }
    let n = dims
        .nx
        .checked_mul(dims.ny)
        .and_then(|v| v.checked_mul(dims.nz))
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::BadMagic("dims overflow".into()))?;
    let payload = &bytes[FRV_HEADER_LEN..];
    if payload.len() != 4 * n {
        return Err(Error::PayloadMismatch {
            expected: 4 * n,
            found: payload.len(),
        });
    }
    let words = payload.chunks_exact(4).map(|c| <[u8; 4]>::try_from(c).unwrap());
    Ok(match kind {
        KIND_INTENSITY => {
            FrvPayload::Volume(Volume::intensity(dims, words.map(f32::from_le_bytes).collect())?)
        }
        KIND_LABEL => FrvPayload::Volume(Volume::labels(
            dims,
            words.map(|w| i32::from_le_bytes(w) as f32).collect(),
        )?),
        _ => FrvPayload::Field(DisplacementField::new(
            dims,
            words.map(f32::from_le_bytes).collect(),
        )?),
    })
}
