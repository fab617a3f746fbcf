//! Feature map container formats.
//!
//! Binary layout, all integers little-endian:
//!
//! | offset | size | field                           |
//! |--------|------|---------------------------------|
//! | 0      | 4    | magic `b"LGAF"`                 |
//! | 4      | 4    | `u32` height                    |
//! | 8      | 4    | `u32` width                     |
//! | 12     | 4    | `u32` channels                  |
//! | 16     | 1    | `u8` dtype, `0` = f32, `1` = f64 |
//! | 17     | ..   | row-major payload               |
//!
//! The JSON debug form is `[[[c0, c1, ..], ..row], ..rows]`, i.e. nested
//! `H x W x C` arrays.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{LgaError, Result};
use crate::tensor::FeatureMap;

pub const MAGIC: &[u8; 4] = b"LGAF";
pub const HEADER_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(LgaError::Format(format!("unknown dtype tag {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode(map: &FeatureMap, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + map.data().len() * dtype.width());
    out.extend_from_slice(MAGIC);
    for dim in [map.height(), map.width(), map.channels()] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.push(dtype as u8);
    match dtype {
        DType::F32 => map
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => map
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Decode a container; f32 payloads are widened to f64.
pub fn decode(bytes: &[u8]) -> Result<(FeatureMap, DType)> {
    if bytes.len() < HEADER_LEN {
        return Err(LgaError::Format(format!(
            "container is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(LgaError::Format("bad magic, expected LGAF".into()));
    }
    let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(4), dim(8), dim(12));
    let dtype = DType::from_tag(bytes[16])?;
    let payload = &bytes[HEADER_LEN..];
    let count = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| LgaError::Format("dimensions overflow".into()))?;
    if payload.len() != count * dtype.width() {
        return Err(LgaError::Format(format!(
            "payload is {} bytes, expected {} for {h}x{w}x{c} {dtype:?}",
            payload.len(),
            count * dtype.width()
        )));
    }
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
    };
    Ok((FeatureMap::new(h, w, c, data)?, dtype))
}

pub fn write_feature_map(path: impl AsRef<Path>, map: &FeatureMap, dtype: DType) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode(map, dtype))?;
    w.flush()?;
    Ok(())
}

pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    Ok(decode(&bytes)?.0)
}

pub fn to_json(map: &FeatureMap) -> serde_json::Value {
    let rows: Vec<Vec<Vec<f64>>> = (0..map.height())
        .map(|y| {
            (0..map.width())
                .map(|x| map.node(y * map.width() + x).to_vec())
                .collect()
        })
        .collect();
    serde_json::json!(rows)
}

pub fn from_json(value: &serde_json::Value) -> Result<FeatureMap> {
    let rows: Vec<Vec<Vec<f64>>> = serde_json::from_value(value.clone())?;
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    let c = rows.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut data = Vec::with_capacity(h * w * c);
    for row in &rows {
        if row.len() != w {
            return Err(LgaError::Format("ragged rows in JSON feature map".into()));
        }
        for node in row {
            if node.len() != c {
                return Err(LgaError::Format(
                    "ragged channels in JSON feature map".into(),
                ));
            }
            data.extend_from_slice(node);
        }
    }
    FeatureMap::new(h, w, c, data)
}
