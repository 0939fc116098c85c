//! `SDFG` binary volume files.
//!
//! Layout (little-endian): magic `b"SDFG"`, `u32` version, `u32` R,
//! `3 x f64` domain min, `3 x f64` domain max, then the payload in z-major
//! order. Version 1 carries `R^3` `f32` values. Version 2 is a tagged channel
//! volume: one `u8` channel tag (ASCII, e.g. `b'C'`), one `u8` dtype
//! (0 = `f32`, 1 = `u8`), then `R^3` values of that dtype.

use std::fs;
use std::path::Path;

use super::SdfGrid;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SDFG";
const HEADER_LEN: usize = 4 + 4 + 4 + 48;

/// Payload of a tagged channel volume.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelData {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

fn header(version: u32, r: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + r.pow(3) * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(r as u32).to_le_bytes());
    for v in [-1.0f64, -1.0, -1.0, 1.0, 1.0, 1.0] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Encodes a grid as a version-1 file body. Values are stored as `f32`.
pub fn encode_sdfg(grid: &SdfGrid) -> Vec<u8> {
    let mut out = header(1, grid.resolution());
    for v in grid.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn write_sdfg(path: impl AsRef<Path>, grid: &SdfGrid) -> Result<()> {
    write_file(path.as_ref(), &encode_sdfg(grid))
}

struct Parsed<'a> {
    version: u32,
    resolution: usize,
    body: &'a [u8],
}

fn parse<'a>(path: &Path, bytes: &'a [u8]) -> Result<Parsed<'a>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing SDFG magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    let resolution = u32_at(8) as usize;
    if resolution < 2 || resolution > 1024 {
        return Err(Error::format(path, format!("bad resolution {resolution}")));
    }
    for a in 0..3 {
        if f64_at(12 + 8 * a) != -1.0 || f64_at(36 + 8 * a) != 1.0 {
            return Err(Error::format(path, "domain must be [-1,1]^3"));
        }
    }
    Ok(Parsed {
        version,
        resolution,
        body: &bytes[HEADER_LEN..],
    })
}

pub fn decode_sdfg(path: &Path, bytes: &[u8]) -> Result<SdfGrid> {
    let p = parse(path, bytes)?;
    if p.version != 1 {
        return Err(Error::format(path, format!("expected version 1, got {}", p.version)));
    }
    let n = p.resolution.pow(3);
    if p.body.len() != 4 * n {
        return Err(Error::format(path, "truncated payload"));
    }
    let values = p
        .body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    SdfGrid::from_values(p.resolution, values)
}

pub fn read_sdfg(path: impl AsRef<Path>) -> Result<SdfGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sdfg(path, &bytes)
}

pub fn write_sdfg_channel(
    path: impl AsRef<Path>,
    resolution: usize,
    tag: u8,
    data: &ChannelData,
) -> Result<()> {
    let mut out = header(2, resolution);
    out.push(tag);
    match data {
        ChannelData::F32(v) => {
            out.push(0);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        ChannelData::U8(v) => {
            out.push(1);
            out.extend_from_slice(v);
        }
    }
    write_file(path.as_ref(), &out)
}

/// Reads a tagged channel volume, returning `(R, tag, data)`.
pub fn read_sdfg_channel(path: impl AsRef<Path>) -> Result<(usize, u8, ChannelData)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let p = parse(path, &bytes)?;
    if p.version != 2 || p.body.len() < 2 {
        return Err(Error::format(path, "expected a version-2 channel volume"));
    }
    let (tag, dtype, payload) = (p.body[0], p.body[1], &p.body[2..]);
    let n = p.resolution.pow(3);
    let data = match dtype {
        0 if payload.len() == 4 * n => ChannelData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        1 if payload.len() == n => ChannelData::U8(payload.to_vec()),
        _ => return Err(Error::format(path, "bad channel dtype or length")),
    };
    Ok((p.resolution, tag, data))
}
