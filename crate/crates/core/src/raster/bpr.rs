//! The BPR1 container: one line of JSON, a newline, then little-endian
//! `f32` samples in planar band order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Raster;
use crate::error::{Error, Result};
use crate::io::{read_file, write_atomic};

pub const MAGIC: &str = "BPR1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    magic: String,
    width: usize,
    height: usize,
    bands: usize,
    names: Vec<String>,
    scale: f64,
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let header = Header {
        magic: MAGIC.to_string(),
        width: r.width(),
        height: r.height(),
        bands: r.bands(),
        names: r.names().to_vec(),
        scale: r.scale(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serialises");
    out.push(b'\n');
    out.reserve(r.data().len() * 4);
    for v in r.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(bytes.len() as u64, "missing header terminator"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format(e.column().saturating_sub(1) as u64, format!("bad header: {e}")))?;
    if header.magic != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected {MAGIC:?}", header.magic)));
    }
    if header.names.len() != header.bands {
        return Err(Error::format(0, format!("{} band names for {} bands", header.names.len(), header.bands)));
    }
    let start = nl + 1;
    let n = header
        .width
        .checked_mul(header.height)
        .and_then(|v| v.checked_mul(header.bands))
        .ok_or_else(|| Error::format(0, "header dimensions overflow"))?;
    let payload = &bytes[start..];
    if payload.len() != n * 4 {
        let at = start + payload.len().min(n * 4);
        return Err(Error::format(
            at as u64,
            format!(
                "payload holds {} bytes but {}x{}x{} floats need {}",
                payload.len(),
                header.width,
                header.height,
                header.bands,
                n * 4
            ),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if !v.is_finite() {
            return Err(Error::format((start + 4 * i) as u64, format!("non-finite sample {v}")));
        }
        data.push(v);
    }
    Raster::new(header.width, header.height, header.names, data).map(|r| r.with_scale(header.scale))
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    decode(&read_file(path)?).map_err(|e| match e {
        Error::Format { msg, offset } => Error::Format { msg: format!("{}: {msg}", path.display()), offset },
        other => other,
    })
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    write_atomic(path, &encode(r))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Raster {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 / 23.0).collect();
        Raster::new(3, 2, vec!["B".into(), "G".into(), "R".into(), "NIR".into()], data).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let r = sample();
        let back = decode(&encode(&r)).unwrap();
        assert_eq!(back, r);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bpr");
        write_raster(&p, &r).unwrap();
        assert_eq!(read_raster(&p).unwrap(), r);
    }

    #[test]
    fn missing_plane_is_format_error() {
        let mut bytes = encode(&sample());
        let full = bytes.len();
        bytes.truncate(full - 6 * 4);
        match decode(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, bytes.len()),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_nan_rejected() {
        let bytes = encode(&sample());
        let text = String::from_utf8_lossy(&bytes).replacen("BPR1", "BPR2", 1);
        let mut bad = text.as_bytes()[..bytes.iter().position(|&b| b == b'\n').unwrap() + 1].to_vec();
        bad.extend_from_slice(&bytes[bad.len()..]);
        assert!(matches!(decode(&bad), Err(Error::Format { offset: 0, .. })));

        let mut nan = encode(&sample());
        let start = nan.iter().position(|&b| b == b'\n').unwrap() + 1;
        nan[start + 8..start + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode(&nan) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, start + 8),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
