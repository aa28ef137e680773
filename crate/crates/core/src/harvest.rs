//! Per-class sets of misclassified training images and their penultimate
//! feature vectors.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::fsio;
use crate::model::Classifier;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MisclassifiedItem {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
}

/// Training images of one class that the classifier predicts as another class.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MisclassifiedSet {
    pub class: usize,
    /// Sorted by id.
    pub items: Vec<MisclassifiedItem>,
    /// One vector per item, same order, once attached.
    pub features: Option<Vec<Vec<f64>>>,
}

impl MisclassifiedSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.id.as_str())
    }
}

/// Class index → misclassified set. Every class has an entry, possibly empty.
pub type Harvest = BTreeMap<usize, MisclassifiedSet>;

/// Runs the classifier over the train split and partitions its errors by true class.
pub fn harvest_misclassified(model: &Classifier, manifest: &DatasetManifest) -> Result<Harvest> {
    let train: Vec<_> = manifest.split(Split::Train).collect();
    if train.is_empty() {
        return Err(Error::Input("train split is empty".into()));
    }
    let preds: Vec<usize> = train
        .par_iter()
        .map(|e| model.predict(&e.pixels))
        .collect::<Result<_>>()?;
    let mut out: Harvest = (0..manifest.n_classes())
        .map(|c| {
            (
                c,
                MisclassifiedSet {
                    class: c,
                    ..Default::default()
                },
            )
        })
        .collect();
    for (e, &p) in train.iter().zip(&preds) {
        if p != e.label {
            out.get_mut(&e.label)
                .expect("label validated against class count")
                .items
                .push(MisclassifiedItem {
                    id: e.id.clone(),
                    label: e.label,
                    predicted: p,
                });
        }
    }
    for set in out.values_mut() {
        set.items.sort_by(|a, b| a.id.cmp(&b.id));
        if set.items.is_empty() {
            log::warn!("class {} has no misclassified training images", set.class);
        }
    }
    Ok(out)
}

/// Fills `features` of every set with `model.features` of each item.
pub fn attach_features(model: &Classifier, manifest: &DatasetManifest, sets: &mut Harvest) -> Result<()> {
    for set in sets.values_mut() {
        let images = set
            .items
            .iter()
            .map(|it| {
                manifest
                    .get(&it.id)
                    .map(|e| e.pixels.clone())
                    .ok_or_else(|| Error::Input(format!("harvested id {} not in manifest", it.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let feats = images
            .par_iter()
            .map(|img| model.features(img))
            .collect::<Result<Vec<_>>>()?;
        set.features = Some(feats);
    }
    Ok(())
}

pub fn total_items(sets: &Harvest) -> usize {
    sets.values().map(MisclassifiedSet::len).sum()
}

/// Writes one `{"id", "label", "predicted"}` line per item, classes in order.
pub fn save_harvest(path: &Path, sets: &Harvest) -> Result<()> {
    let items: Vec<&MisclassifiedItem> = sets.values().flat_map(|s| &s.items).collect();
    fsio::write_jsonl(path, &items)
}

pub fn load_harvest(path: &Path, n_classes: usize) -> Result<Harvest> {
    let items: Vec<MisclassifiedItem> = fsio::read_jsonl(path)?;
    let mut out: Harvest = (0..n_classes)
        .map(|c| {
            (
                c,
                MisclassifiedSet {
                    class: c,
                    ..Default::default()
                },
            )
        })
        .collect();
    for (line, it) in items.into_iter().enumerate() {
        if it.label >= n_classes || it.predicted >= n_classes || it.label == it.predicted {
            return Err(Error::Parse {
                line: line + 1,
                field: "label".into(),
                message: format!("invalid item {} (label {}, predicted {})", it.id, it.label, it.predicted),
            });
        }
        out.get_mut(&it.label).expect("checked").items.push(it);
    }
    Ok(out)
}

const FEATURE_MAGIC: &[u8; 8] = b"SCGSFEAT";

/// Binary feature file: magic, `u32` dim, `u64` count, then per vector a
/// `u32` id length, the UTF-8 id and `dim` little-endian `f64`s.
pub fn save_features(path: &Path, sets: &Harvest) -> Result<()> {
    let mut rows: Vec<(&str, &[f64])> = Vec::new();
    for set in sets.values() {
        let feats = set
            .features
            .as_ref()
            .ok_or_else(|| Error::Input(format!("class {} has no attached features", set.class)))?;
        rows.extend(set.items.iter().zip(feats).map(|(it, f)| (it.id.as_str(), f.as_slice())));
    }
    let dim = rows.first().map_or(0, |r| r.1.len());
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    for (id, f) in rows {
        if f.len() != dim {
            return Err(Error::Input(format!("feature of {id} has dim {} (expected {dim})", f.len())));
        }
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fsio::write_atomic(path, &out)
}

pub fn load_features(path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let bytes = fsio::read(path)?;
    let bad = |m: &str| Error::Image {
        path: path.display().to_string(),
        message: m.to_string(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated feature file"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    let dim = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8")) as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4")) as usize;
        let id = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("id is not UTF-8"))?;
        let v = take(dim * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect();
        out.insert(id, v);
    }
    Ok(out)
}

/// Re-attaches persisted features to harvested sets by id.
pub fn attach_loaded_features(sets: &mut Harvest, features: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    for set in sets.values_mut() {
        let feats = set
            .items
            .iter()
            .map(|it| {
                features
                    .get(&it.id)
                    .cloned()
                    .ok_or_else(|| Error::Input(format!("no stored feature for {}", it.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        set.features = Some(feats);
    }
    Ok(())
}
