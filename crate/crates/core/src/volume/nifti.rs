//! Read-only NIfTI-1 support: single-file, uncompressed, little-endian.
//!
//! Only `sizeof_hdr`, `dim`, `datatype`, `bitpix`, `vox_offset` and the
//! intensity scaling pair are interpreted. Spatial metadata is ignored.

use super::{Dims, Volume};
use crate::error::{Error, Result};

pub const NIFTI_HEADER_LEN: usize = 348;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn i16_at(b: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([b[at], b[at + 1]])
}

fn i32_at(b: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::BadMagic(format!(
            "file of {} bytes is shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    let sizeof_hdr = i32_at(bytes, 0);
    if sizeof_hdr != NIFTI_HEADER_LEN as i32 {
        let hint = if sizeof_hdr.swap_bytes() == NIFTI_HEADER_LEN as i32 {
            " (big-endian files are not supported)"
        } else {
            ""
        };
        return Err(Error::BadMagic(format!("sizeof_hdr = {sizeof_hdr}{hint}")));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::BadMagic(
            "magic is not \"n+1\" (only single-file .nii is supported)".into(),
        ));
    }

    let ndim = i16_at(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::BadMagic(format!("dim[0] = {ndim}")));
    }
    let mut ext = [1usize; 3];
    for (a, e) in ext.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let d = i16_at(bytes, 42 + 2 * a);
        if d < 1 {
            return Err(Error::BadMagic(format!("dim[{}] = {d}", a + 1)));
        }
        *e = d as usize;
    }
    for a in 4..=ndim as usize {
        if i16_at(bytes, 40 + 2 * a) > 1 {
            return Err(Error::UnsupportedKind(
                "multi-volume or multi-component NIfTI".into(),
            ));
        }
    }
    let dims = Dims::from_array(ext);

    let datatype = i16_at(bytes, 70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::UnsupportedKind(format!("NIfTI datatype {other}"))),
    };

    let vox_offset = f32_at(bytes, 108);
    if vox_offset.is_nan() || vox_offset < NIFTI_HEADER_LEN as f32 {
        return Err(Error::BadMagic(format!("vox_offset = {vox_offset}")));
    }
    let start = vox_offset as usize;
    let need = dims.len() * width;
    let found = bytes.len().saturating_sub(start);
    if found < need {
        return Err(Error::PayloadMismatch {
            expected: need,
            found,
        });
    }
    let raw = &bytes[start..start + need];
    let mut data: Vec<f32> = match datatype {
        DT_UINT8 => raw.iter().map(|&b| b as f32).collect(),
        DT_INT16 => raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32).collect(),
        DT_INT32 => raw
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
        DT_FLOAT32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        _ => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
    };

    let slope = f32_at(bytes, 112);
    let inter = f32_at(bytes, 116);
    if slope != 0.0 && slope.is_finite() && inter.is_finite() && (slope != 1.0 || inter != 0.0) {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Volume::intensity(dims, data)
}
