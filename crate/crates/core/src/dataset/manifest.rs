//! JSON-lines manifest format.
//!
//! Line 1 is a header `{"class_names": [...], "attribute_names": [...], "seed": N}`;
//! every following line is one image record
//! `{"id", "path", "label", "group_attr"?, "split", "provenance", "fg_box"?}`.
//! Paths are relative to the manifest's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{Map, Value};

use super::{DatasetManifest, Group, LabeledImage, Provenance, Split};
use crate::error::{Error, Result};
use crate::fsio;
use crate::image::Image;

#[derive(Serialize)]
struct Header<'a> {
    class_names: &'a [String],
    attribute_names: &'a [String],
    seed: u64,
}

#[derive(Serialize)]
struct Record<'a> {
    id: &'a str,
    path: String,
    label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    group_attr: Option<usize>,
    split: Split,
    provenance: Provenance,
    #[serde(skip_serializing_if = "Option::is_none")]
    fg_box: Option<[usize; 4]>,
}

/// Relative image path used for an entry when a manifest is written.
pub fn image_rel_path(id: &str) -> String {
    format!("images/{id}.png")
}

/// Writes the manifest and every image (as PNG under `images/`) next to it.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    manifest
        .entries
        .par_iter()
        .map(|e| e.pixels.save_png(&dir.join(image_rel_path(&e.id))))
        .collect::<Result<Vec<()>>>()?;
    let mut out = Vec::new();
    serde_json::to_writer(
        &mut out,
        &Header {
            class_names: &manifest.class_names,
            attribute_names: &manifest.attribute_names,
            seed: manifest.seed,
        },
    )?;
    out.push(b'\n');
    for e in &manifest.entries {
        serde_json::to_writer(
            &mut out,
            &Record {
                id: &e.id,
                path: image_rel_path(&e.id),
                label: e.label,
                group_attr: e.attribute(),
                split: e.split,
                provenance: e.provenance,
                fg_box: e.fg_box,
            },
        )?;
        out.push(b'\n');
    }
    fsio::write_atomic(path, &out)
}

struct ParsedRecord {
    id: String,
    path: PathBuf,
    label: usize,
    group_attr: Option<usize>,
    split: Split,
    provenance: Provenance,
    fg_box: Option<[usize; 4]>,
}

fn perr(line: usize, field: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, line: usize, name: &str) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| perr(line, name, "missing"))
}

fn as_index(v: &Value, line: usize, name: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| perr(line, name, format!("expected a non-negative integer, got {v}")))
}

fn as_str<'a>(v: &'a Value, line: usize, name: &str) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| perr(line, name, format!("expected a string, got {v}")))
}

fn string_list(obj: &Map<String, Value>, name: &str) -> Result<Vec<String>> {
    let arr = field(obj, 1, name)?
        .as_array()
        .ok_or_else(|| perr(1, name, "expected an array of strings"))?;
    arr.iter()
        .map(|v| as_str(v, 1, name).map(str::to_string))
        .collect()
}

fn parse_record(
    line_no: usize,
    text: &str,
    n_classes: usize,
    n_attributes: usize,
) -> Result<ParsedRecord> {
    let value: Value =
        serde_json::from_str(text).map_err(|e| perr(line_no, "<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| perr(line_no, "<record>", "expected a JSON object"))?;
    let id = as_str(field(obj, line_no, "id")?, line_no, "id")?.to_string();
    let path = PathBuf::from(as_str(field(obj, line_no, "path")?, line_no, "path")?);
    let label = as_index(field(obj, line_no, "label")?, line_no, "label")?;
    if label >= n_classes {
        return Err(perr(
            line_no,
            "label",
            format!("label {label} ≥ number of classes {n_classes}"),
        ));
    }
    let group_attr = match obj.get("group_attr") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let a = as_index(v, line_no, "group_attr")?;
            if a >= n_attributes {
                return Err(perr(
                    line_no,
                    "group_attr",
                    format!("attribute {a} ≥ number of attributes {n_attributes}"),
                ));
            }
            Some(a)
        }
    };
    let split = serde_json::from_value(field(obj, line_no, "split")?.clone())
        .map_err(|e| perr(line_no, "split", e.to_string()))?;
    let provenance = match obj.get("provenance") {
        None => Provenance::Original,
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| perr(line_no, "provenance", e.to_string()))?,
    };
    let fg_box = match obj.get("fg_box") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|e| perr(line_no, "fg_box", e.to_string()))?,
        ),
    };
    Ok(ParsedRecord {
        id,
        path,
        label,
        group_attr,
        split,
        provenance,
        fg_box,
    })
}

/// Reads a manifest and decodes every referenced image.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fsio::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| perr(1, "<header>", "manifest is empty"))?;
    let header: Value =
        serde_json::from_str(header_line).map_err(|e| perr(1, "<header>", e.to_string()))?;
    let header = header
        .as_object()
        .ok_or_else(|| perr(1, "<header>", "expected a JSON object"))?;
    let class_names = string_list(header, "class_names")?;
    let attribute_names = string_list(header, "attribute_names")?;
    let seed = field(header, 1, "seed")?
        .as_u64()
        .ok_or_else(|| perr(1, "seed", "expected a non-negative integer"))?;

    let records = lines
        .map(|(i, l)| parse_record(i + 1, l, class_names.len(), attribute_names.len()))
        .collect::<Result<Vec<_>>>()?;

    let entries = records
        .into_par_iter()
        .map(|r| {
            let full = dir.join(&r.path);
            if !full.exists() {
                return Err(Error::io(
                    &full,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
                ));
            }
            let pixels = Image::load_png(&full)?;
            Ok(LabeledImage {
                id: r.id,
                pixels: Arc::new(pixels),
                label: r.label,
                group: r.group_attr.map(|attribute| Group {
                    label: r.label,
                    attribute,
                }),
                split: r.split,
                provenance: r.provenance,
                fg_box: r.fg_box,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let manifest = DatasetManifest {
        class_names,
        attribute_names,
        seed,
        entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    fn small() -> DatasetManifest {
        generate_synthetic(&SynthConfig {
            n_train: 12,
            n_val: 4,
            n_test: 4,
            image_size: 12,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let m = small();
        save_manifest(&m, &path).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
    }

    #[test]
    fn missing_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let m = small();
        save_manifest(&m, &path).unwrap();
        let victim = dir.path().join(image_rel_path(&m.entries[3].id));
        std::fs::remove_file(&victim).unwrap();
        match load_manifest(&path) {
            Err(Error::Io { path, .. }) => assert_eq!(path, victim),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_label_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        save_manifest(&small(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let broken = text.replacen("\"label\":0", "\"label\":7", 1);
        std::fs::write(&path, broken).unwrap();
        match load_manifest(&path) {
            Err(Error::Parse { line, field, .. }) => {
                assert_eq!(field, "label");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_record_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        save_manifest(&small(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let broken = text.replacen("\"split\":\"train\"", "\"split\":\"holdout\"", 1);
        std::fs::write(&path, broken).unwrap();
        assert!(matches!(
            load_manifest(&path),
            Err(Error::Parse { field, .. }) if field == "split"
        ));
    }
}
