//! LDSC descriptor files.
//!
//! ```text
//! "LDSC" | version: u16 = 1 | kind: u8 (0 global, 1 local) | dim: u32 | count: u64
//! layer name: u32 byte length + UTF-8 bytes
//! global payload: count × dim × f32
//! local payload:  count × (x, y, z, f_0 .. f_{dim-1}) × f32
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use nalgebra::Point3;

use super::{GlobalDescriptor, LocalFeatureCloud};
use crate::error::{LockitError, Result};

pub const LDSC_MAGIC: &[u8; 4] = b"LDSC";
const LDSC_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LdscKind {
    Global = 0,
    Local = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LdscPayload {
    Global(Vec<GlobalDescriptor>),
    Local(LocalFeatureCloud),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdscFile {
    pub dim: usize,
    pub layer: String,
    pub payload: LdscPayload,
}

impl LdscFile {
    pub fn kind(&self) -> LdscKind {
        match self.payload {
            LdscPayload::Global(_) => LdscKind::Global,
            LdscPayload::Local(_) => LdscKind::Local,
        }
    }

    pub fn count(&self) -> usize {
        match &self.payload {
            LdscPayload::Global(v) => v.len(),
            LdscPayload::Local(l) => l.len(),
        }
    }
}

fn header(out: &mut Vec<u8>, kind: LdscKind, dim: usize, count: usize, layer: &str) {
    out.extend_from_slice(LDSC_MAGIC);
    out.extend_from_slice(&LDSC_VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(count as u64).to_le_bytes());
    out.extend_from_slice(&(layer.len() as u32).to_le_bytes());
    out.extend_from_slice(layer.as_bytes());
}

pub fn encode_global(descriptors: &[GlobalDescriptor], layer: &str) -> Result<Vec<u8>> {
    let dim = descriptors.first().map_or(0, |d| d.len());
    if let Some(bad) = descriptors.iter().find(|d| d.len() != dim) {
        return Err(LockitError::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    let mut out = Vec::with_capacity(32 + layer.len() + descriptors.len() * dim * 4);
    header(&mut out, LdscKind::Global, dim, descriptors.len(), layer);
    for d in descriptors {
        for v in &d.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn encode_local(features: &LocalFeatureCloud, layer: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + layer.len() + features.len() * (features.dim + 3) * 4);
    header(&mut out, LdscKind::Local, features.dim, features.len(), layer);
    for (i, p) in features.points.iter().enumerate() {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for v in features.feature(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<LdscFile, String> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(format!("truncated: need {n} bytes, have {}", bytes.len()))
        } else {
            Ok(())
        }
    };
    need(23)?;
    if &bytes[0..4] != LDSC_MAGIC {
        return Err("missing LDSC magic".into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != LDSC_VERSION {
        return Err(format!("unsupported LDSC version {version}"));
    }
    let kind = bytes[6];
    let dim = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[11..19].try_into().unwrap()) as usize;
    let name_len = u32::from_le_bytes(bytes[19..23].try_into().unwrap()) as usize;
    need(23 + name_len)?;
    let layer = std::str::from_utf8(&bytes[23..23 + name_len])
        .map_err(|e| format!("layer name is not UTF-8: {e}"))?
        .to_string();
    let body = &bytes[23 + name_len..];
    let row = match kind {
        0 => dim,
        1 => dim + 3,
        k => return Err(format!("unknown kind {k}")),
    };
    let expected = count
        .checked_mul(row)
        .and_then(|n| n.checked_mul(4))
        .ok_or("payload size overflows")?;
    if body.len() != expected {
        return Err(format!("payload has {} bytes, expected {expected}", body.len()));
    }
    let floats: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if floats.iter().any(|v| !v.is_finite()) {
        return Err("non-finite value in payload".into());
    }
    let payload = if kind == 0 {
        LdscPayload::Global(
            floats
                .chunks(dim.max(1))
                .take(count)
                .map(|c| GlobalDescriptor::new(c[..dim].to_vec()))
                .collect(),
        )
    } else {
        let mut points = Vec::with_capacity(count);
        let mut feats = Vec::with_capacity(count * dim);
        for r in floats.chunks_exact(row) {
            points.push(Point3::new(r[0] as f64, r[1] as f64, r[2] as f64));
            feats.extend_from_slice(&r[3..]);
        }
        LdscPayload::Local(LocalFeatureCloud::new(points, dim, feats).map_err(|e| e.to_string())?)
    };
    Ok(LdscFile { dim, layer, payload })
}

pub fn read_ldsc(path: &Path) -> Result<LdscFile> {
    let bytes = fs::read(path).map_err(|e| LockitError::io(path, e))?;
    decode(&bytes).map_err(|m| LockitError::format(path, m))
}

pub fn write_global_file(path: &Path, descriptor: &GlobalDescriptor, layer: &str) -> Result<()> {
    let bytes = encode_global(std::slice::from_ref(descriptor), layer)?;
    fs::write(path, bytes).map_err(|e| LockitError::io(path, e))
}

pub fn write_local_file(path: &Path, features: &LocalFeatureCloud, layer: &str) -> Result<()> {
    fs::write(path, encode_local(features, layer)).map_err(|e| LockitError::io(path, e))
}
