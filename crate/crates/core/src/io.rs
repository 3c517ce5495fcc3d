//! The `.bmck` container: one line of compact JSON followed by raw
//! little-endian `f64` values.
//!
//! The manifest always carries `format_version`, `dtype` and `values` (the
//! number of `f64`s in the blob). Callers add whatever else they need.
//! Files are written to a temporary sibling and renamed into place.

use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;
pub const DTYPE: &str = "f64le";

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Serializes a container into bytes. `manifest` must be a JSON object;
/// the common header fields are filled in here.
pub fn encode(mut manifest: Map<String, Value>, values: &[f64]) -> Vec<u8> {
    manifest.insert("format_version".into(), FORMAT_VERSION.into());
    manifest.insert("dtype".into(), DTYPE.into());
    manifest.insert("values".into(), (values.len() as u64).into());
    let mut out = serde_json::to_vec(&Value::Object(manifest)).expect("JSON map serializes");
    out.push(b'\n');
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(Map<String, Value>, Vec<f64>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing manifest line".into()))?;
    let manifest: Value = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    let Value::Object(manifest) = manifest else {
        return Err(Error::Format("manifest is not an object".into()));
    };
    match manifest.get("format_version").and_then(Value::as_u64) {
        Some(FORMAT_VERSION) => {}
        other => return Err(Error::Format(format!("unsupported format_version {other:?}"))),
    }
    if manifest.get("dtype").and_then(Value::as_str) != Some(DTYPE) {
        return Err(Error::Format("dtype must be f64le".into()));
    }
    let count = manifest
        .get("values")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::Format("manifest lacks value count".into()))? as usize;
    let blob = &bytes[nl + 1..];
    if blob.len() != count * 8 {
        return Err(Error::Format(format!(
            "blob holds {} bytes, manifest declares {} values",
            blob.len(),
            count
        )));
    }
    let values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((manifest, values))
}

pub fn write(path: &Path, manifest: Map<String, Value>, values: &[f64]) -> Result<()> {
    write_atomic(path, &encode(manifest, values))
}

pub fn read(path: &Path) -> Result<(Map<String, Value>, Vec<f64>)> {
    decode(&std::fs::read(path)?)
}

/// Fetches and deserializes a manifest field.
pub fn field<T: serde::de::DeserializeOwned>(manifest: &Map<String, Value>, key: &str) -> Result<T> {
    let v = manifest
        .get(key)
        .ok_or_else(|| Error::Format(format!("manifest lacks `{key}`")))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("manifest `{key}`: {e}")))
}
