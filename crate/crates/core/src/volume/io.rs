//! On-disk volume format: `<name>.json` header plus `<name>.raw` payload of
//! little-endian `f32` values in `(z, y, x)` row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Grid, Vec3, Volume};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing: Vec3,
    origin: Vec3,
    dtype: String,
    byte_order: String,
}

fn base_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Writes `<path>.json` and `<path>.raw`. A trailing `.json`/`.raw` on `path`
/// is ignored. Values are stored as `f32`.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let base = base_path(path.as_ref());
    let header_path = with_suffix(&base, "json");
    let raw_path = with_suffix(&base, "raw");
    v.grid.validate()?;
    if v.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(raw_path));
    }
    let header = Header {
        dims: v.grid.dims,
        spacing: v.grid.spacing,
        origin: v.grid.origin,
        dtype: "f32".into(),
        byte_order: "little".into(),
    };
    if let Some(parent) = base.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(&header_path, json).map_err(|e| Error::io(&header_path, e))?;
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for &x in &v.data {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let base = base_path(path.as_ref());
    let header_path = with_suffix(&base, "json");
    let raw_path = with_suffix(&base, "raw");
    if !header_path.exists() {
        return Err(Error::MissingFile(header_path));
    }
    if !raw_path.exists() {
        return Err(Error::MissingFile(raw_path));
    }
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let invalid = |reason: String| Error::InvalidHeader {
        path: header_path.clone(),
        reason,
    };
    let header: Header = serde_json::from_str(&text).map_err(|e| invalid(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(invalid(format!("unsupported dtype {:?}", header.dtype)));
    }
    if header.byte_order != "little" {
        return Err(invalid(format!(
            "unsupported byte order {:?}",
            header.byte_order
        )));
    }
    let grid = Grid {
        dims: header.dims,
        spacing: header.spacing,
        origin: header.origin,
    };
    grid.validate().map_err(|e| invalid(e.to_string()))?;

    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = grid.len() as u64 * 4;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: raw_path,
            expected,
            found: bytes.len() as u64,
        });
    }
    let mut data = Vec::with_capacity(grid.len());
    for chunk in bytes.chunks_exact(4) {
        let x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !x.is_finite() {
            return Err(Error::NonFinite(raw_path));
        }
        data.push(x as f64);
    }
    Ok(Volume { grid, data })
}
