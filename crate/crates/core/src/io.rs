//! Feature dumps: a 2-D little-endian `f64` NPY array (`frames × bands`)
//! plus a JSON sidecar with the normalization statistics and segmentation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{MelFeatures, NormStats};
use crate::error::{Error, Result};

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

/// Serializes a C-order `rows × cols` `<f8` array in NPY format 1.0.
pub fn npy_bytes(rows: usize, cols: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{rows}x{cols} array needs {} values, got {}",
            rows * cols,
            values.len()
        )));
    }
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({rows}, {cols}), }}");
    let unpadded = NPY_MAGIC.len() + 2 + 2 + header.len() + 1;
    header.push_str(&" ".repeat((64 - unpadded % 64) % 64));
    header.push('\n');
    let mut out = Vec::with_capacity(unpadded + 64 + values.len() * 8);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn header_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let start = header.find(&format!("'{key}':"))? + key.len() + 3;
    Some(header[start..].trim_start())
}

/// Parses a 2-D `<f8` C-order NPY array into `(rows, cols, values)`.
pub fn parse_npy(buf: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let bad = |m: &str| Error::Parse {
        line: 1,
        reason: format!("npy: {m}"),
    };
    if buf.len() < 10 || &buf[..6] != NPY_MAGIC {
        return Err(bad("missing magic"));
    }
    let (hlen, hstart) = match buf[6] {
        1 => (u16::from_le_bytes([buf[8], buf[9]]) as usize, 10),
        2 | 3 if buf.len() >= 12 => (
            u32::from_le_bytes([buf[8], buf[9], buf[10], buf[11]]) as usize,
            12,
        ),
        v => return Err(bad(&format!("unsupported version {v}"))),
    };
    let header = buf
        .get(hstart..hstart + hlen)
        .and_then(|h| std::str::from_utf8(h).ok())
        .ok_or_else(|| bad("bad header"))?;
    let descr = header_value(header, "descr").ok_or_else(|| bad("no descr"))?;
    if !descr.starts_with("'<f8'") {
        return Err(bad("only little-endian float64 arrays are supported"));
    }
    let fortran = header_value(header, "fortran_order").ok_or_else(|| bad("no fortran_order"))?;
    if !fortran.starts_with("False") {
        return Err(bad("only C-order arrays are supported"));
    }
    let shape = header_value(header, "shape").ok_or_else(|| bad("no shape"))?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| bad("bad shape"))?;
    let dims = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad shape")))
        .collect::<Result<Vec<_>>>()?;
    if dims.len() != 2 {
        return Err(bad("expected a 2-D array"));
    }
    let data = &buf[hstart + hlen..];
    if data.len() != dims[0] * dims[1] * 8 {
        return Err(bad("data length does not match shape"));
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((dims[0], dims[1], values))
}

/// Sidecar describing a feature dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub frames: usize,
    pub bands: usize,
    pub stats: NormStats,
    pub seg_frames: Option<usize>,
    pub padding: Option<usize>,
}

fn sidecar_path(npy: &Path) -> PathBuf {
    npy.with_extension("json")
}

/// Writes `path` (NPY) and the sidecar next to it (`.json`).
pub fn save_features(
    path: &Path,
    f: &MelFeatures,
    seg_frames: Option<usize>,
    padding: Option<usize>,
) -> Result<()> {
    let bytes = npy_bytes(f.frames, f.bands, &f.values)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    let meta = FeatureMeta {
        frames: f.frames,
        bands: f.bands,
        stats: f.stats.clone(),
        seg_frames,
        padding,
    };
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Config(format!("sidecar encoding: {e}")))?;
    std::fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn load_features(path: &Path) -> Result<(MelFeatures, FeatureMeta)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (frames, bands, values) = parse_npy(&buf)?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: FeatureMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        reason: format!("sidecar: {e}"),
    })?;
    if meta.frames != frames || meta.bands != bands {
        return Err(Error::Shape(format!(
            "sidecar says {}x{}, array is {frames}x{bands}",
            meta.frames, meta.bands
        )));
    }
    Ok((
        MelFeatures {
            frames,
            bands,
            values,
            stats: meta.stats.clone(),
        },
        meta,
    ))
}
