//! LPCD binary clouds and whitespace-separated text clouds.
//!
//! LPCD layout (little-endian):
//!
//! ```text
//! "LPCD" | version: u16 = 1 | flags: u8 (bit 0: intensity present) | count: u64
//! count × (x, y, z): f32
//! [count × intensity: f32]      if flags & 1
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Point3;

use super::PointCloud;
use crate::error::{LockitError, Result};

pub const LPCD_MAGIC: &[u8; 4] = b"LPCD";
const LPCD_VERSION: u16 = 1;
const FLAG_INTENSITY: u8 = 1;

pub fn write_lpcd<W: Write>(cloud: &PointCloud, mut w: W) -> std::io::Result<()> {
    let flags = if cloud.intensity.is_some() { FLAG_INTENSITY } else { 0 };
    let mut buf = Vec::with_capacity(15 + cloud.len() * 16);
    buf.extend_from_slice(LPCD_MAGIC);
    buf.extend_from_slice(&LPCD_VERSION.to_le_bytes());
    buf.push(flags);
    buf.extend_from_slice(&(cloud.len() as u64).to_le_bytes());
    for p in &cloud.points {
        for v in [p.x, p.y, p.z] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if let Some(intensity) = &cloud.intensity {
        for v in intensity {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)
}

pub fn save_lpcd(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    write_lpcd(cloud, &mut bytes).map_err(|e| LockitError::io(path, e))?;
    fs::write(path, bytes).map_err(|e| LockitError::io(path, e))
}

pub fn read_lpcd(path: &Path) -> Result<PointCloud> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| LockitError::io(path, e))?;
    decode_lpcd(&bytes).map_err(|m| LockitError::format(path, m))
}

fn decode_lpcd(bytes: &[u8]) -> std::result::Result<PointCloud, String> {
    if bytes.len() < 15 || &bytes[0..4] != LPCD_MAGIC {
        return Err("missing LPCD magic".into());
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != LPCD_VERSION {
        return Err(format!("unsupported LPCD version {version}"));
    }
    let flags = bytes[6];
    let count = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
    let has_intensity = flags & FLAG_INTENSITY != 0;
    let expected = count
        .checked_mul(if has_intensity { 16 } else { 12 })
        .and_then(|n| n.checked_add(15))
        .ok_or("point count overflows")?;
    if bytes.len() != expected {
        return Err(format!("expected {expected} bytes for {count} points, found {}", bytes.len()));
    }
    let f = |off: usize| f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let off = 15 + i * 12;
        let p = Point3::new(f(off) as f64, f(off + 4) as f64, f(off + 8) as f64);
        if !p.iter().all(|v| v.is_finite()) {
            return Err(format!("non-finite coordinate at point {i}"));
        }
        points.push(p);
    }
    let intensity = has_intensity.then(|| {
        let base = 15 + count * 12;
        (0..count).map(|i| f(base + i * 4)).collect()
    });
    Ok(PointCloud { points, intensity })
}

/// One `x y z` triple per line; blank lines and `#` comments are skipped.
pub fn read_text_cloud(path: &Path) -> Result<PointCloud> {
    let file = fs::File::open(path).map_err(|e| LockitError::io(path, e))?;
    let mut points = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LockitError::io(path, e))?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| LockitError::parse(path, n + 1, e.to_string()))?;
        if vals.len() != 3 || !vals.iter().all(|v| v.is_finite()) {
            return Err(LockitError::parse(path, n + 1, "expected three finite numbers"));
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
    }
    Ok(PointCloud::new(points))
}

/// Loads by extension: `.lpcd` binary, anything else as text.
pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("lpcd") => read_lpcd(path),
        _ => read_text_cloud(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let c = PointCloud::from_xyz(&[[1.0, 2.0, 3.0]]);
        let mut b = Vec::new();
        write_lpcd(&c, &mut b).unwrap();
        assert_eq!(&b[0..4], b"LPCD");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 0);
        assert_eq!(&b[7..15], &1u64.to_le_bytes());
        assert_eq!(&b[15..19], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 27);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let c = PointCloud::from_xyz(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let mut b = Vec::new();
        write_lpcd(&c, &mut b).unwrap();
        assert!(decode_lpcd(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_lpcd(&bad).is_err());
    }

    #[test]
    fn text_loader_skips_comments_and_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        fs::write(&p, "# header\n1 2 3\n\n4 5 6 # trailing\n").unwrap();
        let c = load_cloud(&p).unwrap();
        assert_eq!(c.as_arrays(), vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        fs::write(&p, "1 2 3\n1 2\n").unwrap();
        match read_text_cloud(&p) {
            Err(LockitError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn lpcd_roundtrip_f32_exact(
            pts in prop::collection::vec(prop::array::uniform3(-1000.0f32..1000.0), 0..64),
            with_intensity in any::<bool>(),
        ) {
            let mut c = PointCloud::from_xyz(&pts.iter().map(|p| [p[0] as f64, p[1] as f64, p[2] as f64]).collect::<Vec<_>>());
            if with_intensity {
                c.intensity = Some((0..pts.len()).map(|i| i as f32 * 0.5).collect());
            }
            let mut b = Vec::new();
            write_lpcd(&c, &mut b).unwrap();
            prop_assert_eq!(decode_lpcd(&b).unwrap(), c);
        }
    }
}
