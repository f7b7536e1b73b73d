//! Adapter container.
//!
//! Layout: an 8-byte little-endian header length `N`, `N` bytes of UTF-8
//! JSON, then the payload of little-endian `f32` tensors. The header maps
//! tensor names to `{"data_offsets":[begin,end],"dtype":"F32","shape":[..]}`
//! and may carry a `__metadata__` map of strings.
//!
//! Tensors of layer `L`: `L.lora_A` (`[d_out, r]`), `L.lora_B` (`[r, d_in]`),
//! and optionally `L.merger_content` / `L.merger_style` for merged sets.
//!
//! Writing is canonical: tensors are laid out in lexicographic name order,
//! header keys are sorted and no whitespace is emitted.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, FormatError, Result};
use crate::linalg::Matrix;
use crate::lora::{AdapterSet, LoraLayer, MaskPair, MaskVector, Role};

const METADATA_KEY: &str = "__metadata__";
const SUFFIX_A: &str = "lora_A";
const SUFFIX_B: &str = "lora_B";
const SUFFIX_MERGER_CONTENT: &str = "merger_content";
const SUFFIX_MERGER_STYLE: &str = "merger_style";
const ALPHA_LAYER_PREFIX: &str = "alpha:";

struct Tensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

fn tensor_value(begin: usize, end: usize, shape: &[usize]) -> Value {
    // Keys inserted in sorted order so the output is canonical whatever map
    // implementation serde_json was built with.
    let mut obj = Map::new();
    obj.insert("data_offsets".into(), json!([begin, end]));
    obj.insert("dtype".into(), json!("F32"));
    obj.insert("shape".into(), json!(shape));
    Value::Object(obj)
}

fn format_alpha(alpha: f64) -> String {
    format!("{alpha}")
}

/// Canonical byte encoding of an adapter set.
pub fn encode_adapter(set: &AdapterSet) -> Vec<u8> {
    let mut tensors = Vec::new();
    for layer in set.layers() {
        tensors.push(Tensor {
            name: format!("{}.{SUFFIX_A}", layer.name()),
            shape: vec![layer.a().rows(), layer.a().cols()],
            values: layer.a().data().to_vec(),
        });
        tensors.push(Tensor {
            name: format!("{}.{SUFFIX_B}", layer.name()),
            shape: vec![layer.b().rows(), layer.b().cols()],
            values: layer.b().data().to_vec(),
        });
    }
    for (name, pair) in set.mergers() {
        for (suffix, mask) in [
            (SUFFIX_MERGER_CONTENT, &pair.content),
            (SUFFIX_MERGER_STYLE, &pair.style),
        ] {
            tensors.push(Tensor {
                name: format!("{name}.{suffix}"),
                shape: vec![mask.len()],
                values: mask.values().to_vec(),
            });
        }
    }
    tensors.sort_by(|a, b| a.name.cmp(&b.name));

    let mut metadata = BTreeMap::new();
    metadata.insert(
        "format_version".to_string(),
        crate::FORMAT_VERSION.to_string(),
    );
    metadata.insert("role".to_string(), set.role.as_str().to_string());
    let ranks: Vec<usize> = set.layers().map(LoraLayer::rank).collect();
    if let Some(&r) = ranks.first() {
        if ranks.iter().all(|&x| x == r) {
            metadata.insert("rank".to_string(), r.to_string());
        }
    }
    let alphas: Vec<f64> = set.layers().map(LoraLayer::alpha).collect();
    let all_default = set.layers().all(|l| l.alpha() == l.rank() as f64);
    if !all_default {
        if alphas.iter().all(|&a| a == alphas[0]) {
            metadata.insert("alpha".to_string(), format_alpha(alphas[0]));
        } else {
            for layer in set.layers() {
                metadata.insert(
                    format!("{ALPHA_LAYER_PREFIX}{}", layer.name()),
                    format_alpha(layer.alpha()),
                );
            }
        }
    }

    let mut header: BTreeMap<String, Value> = BTreeMap::new();
    let mut meta_obj = Map::new();
    for (k, v) in metadata {
        meta_obj.insert(k, Value::String(v));
    }
    header.insert(METADATA_KEY.to_string(), Value::Object(meta_obj));
    let mut payload = Vec::new();
    for t in &tensors {
        let begin = payload.len();
        for &v in &t.values {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
        header.insert(t.name.clone(), tensor_value(begin, payload.len(), &t.shape));
    }
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out
}

pub fn write_adapter(set: &AdapterSet, path: &Path) -> Result<()> {
    super::write_bytes(path, &encode_adapter(set))
}

pub fn read_adapter(path: &Path) -> Result<AdapterSet> {
    decode_adapter(&super::read_bytes(path)?)
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn header_err(msg: impl Into<String>) -> Error {
    FormatError::Header(msg.into()).into()
}

fn parse_entry(name: &str, value: &Value) -> Result<Entry> {
    let obj = value
        .as_object()
        .ok_or_else(|| header_err(format!("entry for tensor {name} is not an object")))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| header_err(format!("tensor {name} has no dtype")))?;
    if dtype != "F32" {
        return Err(FormatError::UnsupportedDtype {
            tensor: name.to_string(),
            dtype: dtype.to_string(),
        }
        .into());
    }
    let ints = |key: &str| -> Result<Vec<usize>> {
        obj.get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| header_err(format!("tensor {name} has no {key}")))?
            .iter()
            .map(|v| {
                v.as_u64().map(|x| x as usize).ok_or_else(|| {
                    header_err(format!(
                        "tensor {name}: {key} must hold non-negative integers"
                    ))
                })
            })
            .collect()
    };
    let shape = ints("shape")?;
    let offsets = ints("data_offsets")?;
    let [begin, end] = offsets[..] else {
        return Err(header_err(format!(
            "tensor {name}: data_offsets must have two entries"
        )));
    };
    let expected = shape.iter().product::<usize>() * 4;
    if end < begin || end - begin != expected {
        return Err(FormatError::ShapeMismatch {
            tensor: name.to_string(),
            shape,
            begin,
            end,
        }
        .into());
    }
    Ok(Entry {
        name: name.to_string(),
        shape,
        begin,
        end,
    })
}

#[derive(Default)]
struct LayerParts {
    a: Option<Matrix>,
    b: Option<Matrix>,
    merger_content: Option<Vec<f64>>,
    merger_style: Option<Vec<f64>>,
}

fn invalid(tensor: &str, reason: impl Into<String>) -> Error {
    FormatError::InvalidTensor {
        tensor: tensor.to_string(),
        reason: reason.into(),
    }
    .into()
}

/// Parses and validates a container held in memory.
pub fn decode_adapter(bytes: &[u8]) -> Result<AdapterSet> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated(format!(
            "{} bytes is shorter than the 8-byte header length",
            bytes.len()
        ))
        .into());
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let available = (bytes.len() - 8) as u64;
    if header_len > available {
        return Err(FormatError::Truncated(format!(
            "header claims {header_len} bytes but only {available} follow"
        ))
        .into());
    }
    let header_end = 8 + header_len as usize;
    let text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|e| header_err(format!("header is not UTF-8: {e}")))?;
    let header: Value = serde_json::from_str(text)
        .map_err(|e| header_err(format!("header is not valid JSON: {e}")))?;
    let header = header
        .as_object()
        .ok_or_else(|| header_err("header must be a JSON object"))?;
    let payload = &bytes[header_end..];

    let mut metadata = BTreeMap::new();
    let mut entries = Vec::new();
    for (key, value) in header {
        if key == METADATA_KEY {
            let obj = value
                .as_object()
                .ok_or_else(|| header_err("__metadata__ must be an object"))?;
            for (k, v) in obj {
                let s = v
                    .as_str()
                    .ok_or_else(|| header_err(format!("metadata value {k} must be a string")))?;
                metadata.insert(k.clone(), s.to_string());
            }
        } else {
            entries.push(parse_entry(key, value)?);
        }
    }
    if let Some(v) = metadata.get("format_version") {
        if v != crate::FORMAT_VERSION {
            return Err(header_err(format!("unsupported format_version {v:?}")));
        }
    }

    entries.sort_by(|a, b| (a.begin, a.end, &a.name).cmp(&(b.begin, b.end, &b.name)));
    let mut cursor = 0usize;
    let mut previous: Option<&str> = None;
    for e in &entries {
        if e.begin < cursor {
            return Err(FormatError::OverlappingOffsets {
                tensor: e.name.clone(),
                previous: previous.unwrap_or_default().to_string(),
            }
            .into());
        }
        if e.begin > cursor {
            return Err(FormatError::PayloadGap {
                tensor: e.name.clone(),
            }
            .into());
        }
        if e.end > payload.len() {
            return Err(FormatError::Truncated(format!(
                "tensor {} ends at byte {} but the payload has {} bytes",
                e.name,
                e.end,
                payload.len()
            ))
            .into());
        }
        cursor = e.end;
        previous = Some(&e.name);
    }
    if cursor != payload.len() {
        return Err(FormatError::TrailingBytes {
            tensor: previous.unwrap_or("<header>").to_string(),
            extra: payload.len() - cursor,
        }
        .into());
    }

    let mut parts: BTreeMap<String, LayerParts> = BTreeMap::new();
    for e in &entries {
        let values: Vec<f64> = payload[e.begin..e.end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid(&e.name, "contains non-finite values"));
        }
        let (layer, suffix) = e
            .name
            .rsplit_once('.')
            .ok_or_else(|| invalid(&e.name, "name lacks a layer prefix"))?;
        let slot = parts.entry(layer.to_string()).or_default();
        match suffix {
            SUFFIX_A | SUFFIX_B => {
                let [rows, cols] = e.shape[..] else {
                    return Err(invalid(
                        &e.name,
                        format!("expected a 2-d shape, got {:?}", e.shape),
                    ));
                };
                let m = Matrix::new(rows, cols, values)
                    .map_err(|err| invalid(&e.name, err.to_string()))?;
                if suffix == SUFFIX_A {
                    slot.a = Some(m);
                } else {
                    slot.b = Some(m);
                }
            }
            SUFFIX_MERGER_CONTENT | SUFFIX_MERGER_STYLE => {
                if e.shape.len() != 1 {
                    return Err(invalid(
                        &e.name,
                        format!("expected a 1-d shape, got {:?}", e.shape),
                    ));
                }
                if suffix == SUFFIX_MERGER_CONTENT {
                    slot.merger_content = Some(values);
                } else {
                    slot.merger_style = Some(values);
                }
            }
            other => {
                return Err(invalid(
                    &e.name,
                    format!("unrecognized tensor kind {other:?}"),
                ))
            }
        }
    }

    let role = match metadata.get("role") {
        Some(r) => r.parse::<Role>().map_err(|e| header_err(e.to_string()))?,
        None => Role::Content,
    };
    let parse_alpha = |key: &str, raw: &str| -> Result<f64> {
        raw.parse::<f64>()
            .ok()
            .filter(|a| a.is_finite() && *a > 0.0)
            .ok_or_else(|| header_err(format!("metadata {key} = {raw:?} is not a positive number")))
    };
    let global_alpha = metadata
        .get("alpha")
        .map(|raw| parse_alpha("alpha", raw))
        .transpose()?;
    let declared_rank = metadata
        .get("rank")
        .map(|raw| {
            raw.parse::<usize>()
                .map_err(|_| header_err(format!("metadata rank = {raw:?} is not an integer")))
        })
        .transpose()?;

    let mut set = AdapterSet::new(role);
    let mut mergers = Vec::new();
    for (name, p) in parts {
        let (a, b) = match (p.a, p.b) {
            (Some(a), Some(b)) => (a, b),
            (Some(_), None) => {
                return Err(FormatError::MissingTensor {
                    tensor: format!("{name}.{SUFFIX_B}"),
                }
                .into())
            }
            (None, _) => {
                return Err(FormatError::MissingTensor {
                    tensor: format!("{name}.{SUFFIX_A}"),
                }
                .into())
            }
        };
        if a.cols() != b.rows() {
            return Err(invalid(
                &format!("{name}.{SUFFIX_B}"),
                format!(
                    "has {} rows but {name}.{SUFFIX_A} has rank {}",
                    b.rows(),
                    a.cols()
                ),
            ));
        }
        if let Some(r) = declared_rank {
            if a.cols() != r {
                return Err(invalid(
                    &format!("{name}.{SUFFIX_A}"),
                    format!("rank {} differs from metadata rank {r}", a.cols()),
                ));
            }
        }
        let per_layer = format!("{ALPHA_LAYER_PREFIX}{name}");
        let alpha = match metadata.get(&per_layer) {
            Some(raw) => parse_alpha(&per_layer, raw)?,
            None => global_alpha.unwrap_or(a.cols() as f64),
        };
        set.insert(LoraLayer::new(name.clone(), a, b, alpha)?)?;
        match (p.merger_content, p.merger_style) {
            (Some(c), Some(s)) => mergers.push((name, c, s)),
            (None, None) => {}
            (Some(_), None) => {
                return Err(FormatError::MissingTensor {
                    tensor: format!("{name}.{SUFFIX_MERGER_STYLE}"),
                }
                .into())
            }
            (None, Some(_)) => {
                return Err(FormatError::MissingTensor {
                    tensor: format!("{name}.{SUFFIX_MERGER_CONTENT}"),
                }
                .into())
            }
        }
    }
    for (name, c, s) in mergers {
        let content = MaskVector::new(c)
            .map_err(|e| invalid(&format!("{name}.{SUFFIX_MERGER_CONTENT}"), e.to_string()))?;
        let style = MaskVector::new(s)
            .map_err(|e| invalid(&format!("{name}.{SUFFIX_MERGER_STYLE}"), e.to_string()))?;
        set.set_mergers(&name, MaskPair::new(content, style))?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> AdapterSet {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[[0.5, -1.0, 0.0], [0.25, 0.0, 2.0]]).unwrap();
        let layer = LoraLayer::new("blk.q", a, b, 4.0).unwrap();
        AdapterSet::from_layers(Role::Style, [layer]).unwrap()
    }

    #[test]
    fn empty_set_layout() {
        let bytes = encode_adapter(&AdapterSet::new(Role::Content));
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + n);
        let header = std::str::from_utf8(&bytes[8..]).unwrap();
        assert_eq!(
            header,
            r#"{"__metadata__":{"format_version":"1","role":"content"}}"#
        );
        assert!(decode_adapter(&bytes).unwrap().is_empty());
    }

    #[test]
    fn header_is_canonical() {
        let bytes = encode_adapter(&fixture());
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + n]).unwrap();
        assert_eq!(
            header,
            concat!(
                r#"{"__metadata__":{"alpha":"4","format_version":"1","rank":"2","role":"style"},"#,
                r#""blk.q.lora_A":{"data_offsets":[0,16],"dtype":"F32","shape":[2,2]},"#,
                r#""blk.q.lora_B":{"data_offsets":[16,40],"dtype":"F32","shape":[2,3]}}"#
            )
        );
        assert_eq!(bytes.len(), 8 + n + 40);
        assert_eq!(&bytes[8 + n..8 + n + 4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn round_trip() {
        let set = fixture();
        let back = decode_adapter(&encode_adapter(&set)).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn missing_b_is_named() {
        let bytes = encode_adapter(&fixture());
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = r#"{"blk.q.lora_A":{"data_offsets":[0,16],"dtype":"F32","shape":[2,2]}}"#;
        let mut doc = (header.len() as u64).to_le_bytes().to_vec();
        doc.extend_from_slice(header.as_bytes());
        doc.extend_from_slice(&bytes[8 + n..8 + n + 16]);
        let err = decode_adapter(&doc).unwrap_err().to_string();
        assert_eq!(err, "blk.q.lora_B missing");
    }

    fn with_header(header: &str, payload_len: usize) -> Vec<u8> {
        let mut doc = (header.len() as u64).to_le_bytes().to_vec();
        doc.extend_from_slice(header.as_bytes());
        doc.extend(std::iter::repeat_n(0u8, payload_len));
        doc
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(
            decode_adapter(&[1, 2, 3]),
            Err(Error::Format(FormatError::Truncated(_)))
        ));
        let mut short = encode_adapter(&fixture());
        short.truncate(short.len() - 4);
        assert!(matches!(
            decode_adapter(&short),
            Err(Error::Format(FormatError::Truncated(_)))
        ));

        let overlap = r#"{"x.lora_A":{"data_offsets":[0,8],"dtype":"F32","shape":[2,1]},"x.lora_B":{"data_offsets":[4,12],"dtype":"F32","shape":[1,2]}}"#;
        let err = decode_adapter(&with_header(overlap, 12)).unwrap_err();
        assert!(matches!(
            err,
            Error::Format(FormatError::OverlappingOffsets { .. })
        ));
        assert!(err.to_string().contains("x.lora_B"));

        let gap = r#"{"x.lora_A":{"data_offsets":[4,12],"dtype":"F32","shape":[2,1]}}"#;
        assert!(matches!(
            decode_adapter(&with_header(gap, 12)),
            Err(Error::Format(FormatError::PayloadGap { .. }))
        ));

        let shape = r#"{"x.lora_A":{"data_offsets":[0,12],"dtype":"F32","shape":[2,1]}}"#;
        let err = decode_adapter(&with_header(shape, 12)).unwrap_err();
        assert!(matches!(
            err,
            Error::Format(FormatError::ShapeMismatch { .. })
        ));
        assert!(err.to_string().contains("x.lora_A"));

        let dtype = r#"{"x.lora_A":{"data_offsets":[0,4],"dtype":"F16","shape":[2,1]}}"#;
        assert!(matches!(
            decode_adapter(&with_header(dtype, 4)),
            Err(Error::Format(FormatError::UnsupportedDtype { .. }))
        ));

        let trailing = r#"{"x.lora_A":{"data_offsets":[0,8],"dtype":"F32","shape":[2,1]},"x.lora_B":{"data_offsets":[8,16],"dtype":"F32","shape":[1,2]}}"#;
        assert!(matches!(
            decode_adapter(&with_header(trailing, 20)),
            Err(Error::Format(FormatError::TrailingBytes { .. }))
        ));

        let rank = r#"{"x.lora_A":{"data_offsets":[0,8],"dtype":"F32","shape":[2,1]},"x.lora_B":{"data_offsets":[8,24],"dtype":"F32","shape":[2,2]}}"#;
        let err = decode_adapter(&with_header(rank, 24))
            .unwrap_err()
            .to_string();
        assert!(err.contains("x.lora_B"), "{err}");

        let unknown = r#"{"x.weight":{"data_offsets":[0,4],"dtype":"F32","shape":[1]}}"#;
        assert!(decode_adapter(&with_header(unknown, 4))
            .unwrap_err()
            .to_string()
            .contains("x.weight"));
    }

    #[test]
    fn heterogeneous_alpha_and_mergers_round_trip() {
        let l1 = LoraLayer::new("a", Matrix::identity(2), Matrix::identity(2), 3.0).unwrap();
        let l2 = LoraLayer::new("b", Matrix::identity(3), Matrix::identity(3), 0.5).unwrap();
        let mut set = AdapterSet::from_layers(Role::Merged, [l1, l2]).unwrap();
        set.set_mergers(
            "a",
            MaskPair::new(MaskVector::ones(1), MaskVector::new(vec![0.25]).unwrap()),
        )
        .unwrap();
        let back = decode_adapter(&encode_adapter(&set)).unwrap();
        assert_eq!(back, set);
    }
}
