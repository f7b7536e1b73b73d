//! Adapter files, layer manifests and synthetic adapters.

mod container;
mod manifest;
mod synthetic;

pub use container::{decode_adapter, encode_adapter, read_adapter, write_adapter};
pub use manifest::{parse_manifest, read_manifest, LayerManifest, ManifestEntry};
pub use synthetic::{generate_synthetic, sdxl_like_names, SyntheticLayer, SyntheticSpec};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to `path`, mapping failures to [`Error::Io`].
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Serializes a value as pretty JSON with a trailing newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::validation(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Parses JSON, reporting the offending line on syntax errors.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| json_error(text, what, &e))
}

pub(crate) fn json_error(text: &str, what: &str, e: &serde_json::Error) -> Error {
    let line = e.line();
    let context = text
        .lines()
        .nth(line.saturating_sub(1))
        .map(|l| format!(" near `{}`", l.trim()))
        .unwrap_or_default();
    Error::validation(format!(
        "{what}: {e} (line {line}, column {}){context}",
        e.column()
    ))
}
