use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Canonical JSON text: object keys sorted, shortest round-trip float
/// formatting, two-space indentation and a trailing newline.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // `serde_json::Map` is a BTreeMap unless `preserve_order` is enabled, so
    // going through `Value` sorts keys at every nesting level.
    let v = serde_json::to_value(value).map_err(|e| Error::json("<in-memory>", e))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::json("<in-memory>", e))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json_artifact<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = to_canonical_json(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json_artifact<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    match fs::read_to_string(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path.into())),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(t) => Ok(t),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile(path.into())),
        Err(e) => Err(Error::io(path, e)),
    }
}
