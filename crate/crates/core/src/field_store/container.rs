//! Flat little-endian `PANG` container.
//!
//! Layout: magic `PANG`, version `u32`, `B T H W L` as `u32`, `lat0 lon0 dlat dlon`
//! as `f64`, base epoch hour as `i64`, then `B*T*H*W*L` `f32` values in row-major
//! `(B, T, H, W, L)` order.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{GeoGrid, MeteoSequence, SeqDims};
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: [u8; 4] = *b"PANG";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 5 * 4 + 4 * 8 + 8;

pub fn encode_container(seq: &MeteoSequence) -> Result<Vec<u8>> {
    let d = seq.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * seq.data().len());
    buf.extend_from_slice(&CONTAINER_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    for dim in [d.batch, d.frames, d.height, d.width, d.channels] {
        let dim = u32::try_from(dim).map_err(|_| Error::DimensionOverflow(format!("{dim} exceeds u32")))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    let g = seq.geo();
    for v in [g.lat0, g.lon0, g.dlat, g.dlon] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&seq.base_hour().to_le_bytes());
    for v in seq.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_container(bytes: &[u8]) -> Result<MeteoSequence> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated { expected: HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != CONTAINER_MAGIC {
        return Err(Error::MagicMismatch { expected: CONTAINER_MAGIC, found: magic });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != CONTAINER_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dims: Vec<usize> = (0..5).map(|i| u32_at(8 + 4 * i) as usize).collect();
    let dims = SeqDims::new(dims[0], dims[1], dims[2], dims[3], dims[4]);
    let geo = GeoGrid { lat0: f64_at(28), lon0: f64_at(36), dlat: f64_at(44), dlon: f64_at(52) };
    let base_hour = i64::from_le_bytes(bytes[60..68].try_into().unwrap());

    let count = dims.checked_len().ok_or_else(|| Error::DimensionOverflow(format!("{dims:?}")))?;
    let expected = (count as u64)
        .checked_mul(4)
        .and_then(|n| n.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| Error::DimensionOverflow(format!("{dims:?}")))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(Error::Format(format!("{} trailing bytes after payload", actual - expected)));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    MeteoSequence::new(dims, data, base_hour, geo)
}

pub fn write_container(path: impl AsRef<Path>, seq: &MeteoSequence) -> Result<()> {
    let bytes = encode_container(seq)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<MeteoSequence> {
    decode_container(&fs::read(path)?)
}
