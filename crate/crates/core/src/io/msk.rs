//! MSK1 mask tensors.
//!
//! Layout, all little-endian: magic `MSK1`, `u16` version (1), `u16` rank
//! (2 or 3), one `u32` per dimension (`K`, `F`, `T` or just `F`, `T`), then
//! `f32` values with `K` slowest and `T` fastest.

use std::path::Path;

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::mask::MaskTensor;

pub const MSK_MAGIC: &[u8; 4] = b"MSK1";
pub const MSK_VERSION: u16 = 1;

fn malformed(offset: usize, message: impl Into<String>) -> Error {
    Error::format("MSK1", offset as u64, message)
}

fn field<const N: usize>(bytes: &[u8], offset: usize, what: &str) -> Result<[u8; N]> {
    bytes
        .get(offset..offset + N)
        .map(|b| b.try_into().expect("slice has length N"))
        .ok_or_else(|| malformed(offset, format!("truncated {what}")))
}

/// Decodes an MSK1 image. A rank-3 tensor yields one mask per `K` entry;
/// rank 2 yields a single mask.
pub fn decode_masks(bytes: &[u8]) -> Result<Vec<MaskTensor>> {
    if &field::<4>(bytes, 0, "magic")? != MSK_MAGIC {
        return Err(malformed(0, "bad magic (expected MSK1)"));
    }
    let version = u16::from_le_bytes(field(bytes, 4, "version")?);
    if version != MSK_VERSION {
        return Err(Error::Unsupported {
            format: "MSK1",
            message: format!("version {version}"),
        });
    }
    let rank = u16::from_le_bytes(field(bytes, 6, "rank")?) as usize;
    if rank != 2 && rank != 3 {
        return Err(malformed(6, format!("rank {rank} (expected 2 or 3)")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(u32::from_le_bytes(field(bytes, 8 + 4 * i, "dimension")?) as usize);
    }
    let (k, bins, frames) = match dims[..] {
        [f, t] => (1, f, t),
        [k, f, t] => (k, f, t),
        _ => unreachable!(),
    };
    let payload = 8 + 4 * rank;
    let expected = k
        .checked_mul(bins)
        .and_then(|n| n.checked_mul(frames))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| malformed(8, "dimensions overflow"))?;
    let actual = bytes.len() - payload;
    if actual != expected {
        return Err(malformed(
            payload + actual.min(expected),
            format!("payload is {actual} bytes, dimensions {dims:?} need {expected}"),
        ));
    }

    let per_mask = bins * frames;
    let mut masks = Vec::with_capacity(k);
    for kk in 0..k {
        let mut values = Vec::with_capacity(per_mask);
        for i in 0..per_mask {
            let at = payload + 4 * (kk * per_mask + i);
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
            if !(0.0..=1.0).contains(&v) {
                return Err(malformed(at, format!("mask value {v} outside [0, 1]")));
            }
            values.push(v as f64);
        }
        masks.push(MaskTensor::new(bins, frames, values)?);
    }
    Ok(masks)
}

pub fn read_mask(path: &Path) -> Result<Vec<MaskTensor>> {
    decode_masks(&read_file(path)?)
}

/// Encodes masks as a rank-3 tensor (`K = masks.len()`), storing values as
/// `f32`.
pub fn encode_masks(masks: &[MaskTensor]) -> Result<Vec<u8>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("no masks to write".into()))?;
    let (bins, frames) = (first.num_bins(), first.num_frames());
    for m in masks {
        m.check_shape(bins, frames)?;
    }
    let dim = |n: usize| {
        u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("dimension {n} exceeds u32")))
    };
    let mut out = Vec::with_capacity(20 + 4 * masks.len() * bins * frames);
    out.extend_from_slice(MSK_MAGIC);
    out.extend_from_slice(&MSK_VERSION.to_le_bytes());
    out.extend_from_slice(&3u16.to_le_bytes());
    for n in [masks.len(), bins, frames] {
        out.extend_from_slice(&dim(n)?.to_le_bytes());
    }
    for m in masks {
        for &v in m.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_mask(path: &Path, masks: &[MaskTensor]) -> Result<()> {
    write_atomic(path, &encode_masks(masks)?)
}
