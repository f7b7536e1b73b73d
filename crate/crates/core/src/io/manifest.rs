//! Layer manifests: which layers exist, at what resolution, and any class
//! overrides.
//!
//! Accepted shapes are a bare array of entries or
//! `{"format_version": "1", "layers": [...]}`. Each entry is
//! `{"name": .., "resolution": .., "class_override": .., "d_out": .., "d_in": ..}`
//! with everything but `name` optional.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};
use crate::prior::{LayerClass, ResolutionRule};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolution: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_override: Option<String>,
    /// Output dimension, used for parameter accounting when no adapter is at hand.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_out: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_in: Option<usize>,
}

impl ManifestEntry {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            resolution: None,
            class_override: None,
            d_out: None,
            d_in: None,
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Document {
    Bare(Vec<ManifestEntry>),
    Versioned(Versioned),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Versioned {
    format_version: String,
    layers: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LayerManifest {
    entries: Vec<ManifestEntry>,
}

fn manifest_err(entry: &str, reason: impl Into<String>) -> Error {
    FormatError::Manifest {
        entry: entry.to_string(),
        reason: reason.into(),
    }
    .into()
}

impl LayerManifest {
    /// Validates and wraps entries: unique non-empty names, known overrides.
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if e.name.is_empty() {
                return Err(manifest_err("<unnamed>", "name must not be empty"));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(manifest_err(&e.name, "duplicate layer name"));
            }
            if let Some(o) = &e.class_override {
                if LayerClass::from_override(o).is_none() {
                    return Err(manifest_err(
                        &e.name,
                        format!("class_override {o:?} is not one of content, style, neutral"),
                    ));
                }
            }
            if e.d_out == Some(0) || e.d_in == Some(0) {
                return Err(manifest_err(&e.name, "dimensions must be positive"));
            }
        }
        Ok(Self { entries })
    }

    /// Manifest listing `names` with no further information.
    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(names.into_iter().map(ManifestEntry::named).collect())
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Class of `name`: override, then resolution, then name pattern.
    /// Layers absent from the manifest fall back to the name pattern.
    pub fn classify(&self, name: &str, rule: &ResolutionRule) -> LayerClass {
        match self.get(name) {
            Some(e) => {
                if let Some(class) = e
                    .class_override
                    .as_deref()
                    .and_then(LayerClass::from_override)
                {
                    return class;
                }
                rule.classify(name, e.resolution)
            }
            None => rule.classify(name, None),
        }
    }

    pub fn classes<'a, I>(&self, names: I, rule: &ResolutionRule) -> BTreeMap<String, LayerClass>
    where
        I: IntoIterator<Item = &'a str>,
    {
        names
            .into_iter()
            .map(|n| (n.to_string(), self.classify(n, rule)))
            .collect()
    }

    /// JSON text in the versioned shape.
    pub fn to_json(&self) -> String {
        let doc = serde_json::json!({
            "format_version": crate::FORMAT_VERSION,
            "layers": self.entries,
        });
        let mut s = serde_json::to_string_pretty(&doc).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn parse_manifest(text: &str) -> Result<LayerManifest> {
    // Parse as a value first so syntax errors get line context; the untagged
    // enum would otherwise hide the cause.
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| super::json_error(text, "manifest", &e))?;
    let listed = value
        .as_array()
        .or_else(|| value.get("layers").and_then(|l| l.as_array()));
    if let Some(entries) = listed {
        for (i, raw) in entries.iter().enumerate() {
            if let Err(e) = serde_json::from_value::<ManifestEntry>(raw.clone()) {
                let label = raw
                    .get("name")
                    .and_then(|n| n.as_str())
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("#{i}"));
                return Err(manifest_err(&label, e.to_string()));
            }
        }
    }
    let doc: Document = serde_json::from_value(value).map_err(|e| {
        manifest_err(
            "<document>",
            format!("expected an array of layers or {{format_version, layers}}: {e}"),
        )
    })?;
    let entries = match doc {
        Document::Bare(entries) => entries,
        Document::Versioned(v) => {
            if v.format_version != crate::FORMAT_VERSION {
                return Err(manifest_err(
                    "<document>",
                    format!("unsupported format_version {:?}", v.format_version),
                ));
            }
            v.layers
        }
    };
    LayerManifest::new(entries)
}

pub fn read_manifest(path: &Path) -> Result<LayerManifest> {
    let bytes = super::read_bytes(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| manifest_err(&path.display().to_string(), "not UTF-8"))?;
    parse_manifest(&text)
}
