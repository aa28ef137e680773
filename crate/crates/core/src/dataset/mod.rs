//! Labeled images, dataset manifests, the synthetic biased-dataset generator,
//! and merging of synthesized images into a training set.
//!
//! Group labels (class, attribute) live on [`LabeledImage`] but are read only
//! by evaluation and reporting code.

mod manifest;
pub mod render;
mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use manifest::{load_manifest, save_manifest};
pub use synthetic::{generate_synthetic, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Synthesized,
}

/// A (class label, attribute index) pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Group {
    pub label: usize,
    pub attribute: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub pixels: Arc<Image>,
    pub label: usize,
    pub group: Option<Group>,
    pub split: Split,
    pub provenance: Provenance,
    /// Foreground box `[row0, col0, row1, col1)`, synthetic data only.
    pub fg_box: Option<[usize; 4]>,
}

impl LabeledImage {
    /// Attribute index of the group label, if any.
    pub fn attribute(&self) -> Option<usize> {
        self.group.map(|g| g.attribute)
    }

    fn check(&self) -> Result<()> {
        let img = &self.pixels;
        if img.height < 8 || img.width < 8 {
            return Err(Error::Input(format!(
                "{}: image is {}×{}, minimum is 8×8",
                self.id, img.height, img.width
            )));
        }
        if img.channels != 1 && img.channels != 3 {
            return Err(Error::Input(format!(
                "{}: {} channels (expected 1 or 3)",
                self.id, img.channels
            )));
        }
        if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input(format!("{}: intensity outside [0,1]", self.id)));
        }
        if let Some(g) = self.group {
            if g.label != self.label {
                return Err(Error::Input(format!(
                    "{}: group label {} differs from label {}",
                    self.id, g.label, self.label
                )));
            }
        }
        if let Some(b) = self.fg_box {
            if b[0] >= b[2] || b[1] >= b[3] || b[2] > img.height || b[3] > img.width {
                return Err(Error::Input(format!("{}: fg_box {:?} out of bounds", self.id, b)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub attribute_names: Vec<String>,
    pub seed: u64,
    pub entries: Vec<LabeledImage>,
}

impl DatasetManifest {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledImage> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&LabeledImage> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Id → entry index.
    pub fn index(&self) -> BTreeMap<&str, usize> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect()
    }

    /// Train-split count per class.
    pub fn class_counts(&self, split: Split) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for e in self.split(split) {
            counts[e.label] += 1;
        }
        counts
    }

    /// Checks every manifest and per-image invariant.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Input("manifest has no classes".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Input(format!("duplicate id {}", e.id)));
            }
            if e.label >= self.class_names.len() {
                return Err(Error::Input(format!(
                    "{}: label {} ≥ {} classes",
                    e.id,
                    e.label,
                    self.class_names.len()
                )));
            }
            if let Some(g) = e.group {
                if g.attribute >= self.attribute_names.len() {
                    return Err(Error::Input(format!(
                        "{}: attribute {} ≥ {} attributes",
                        e.id,
                        g.attribute,
                        self.attribute_names.len()
                    )));
                }
            }
            e.check()?;
        }
        for split in Split::ALL {
            if self.split(split).next().is_none() {
                return Err(Error::Input(format!("split `{split}` is empty")));
            }
        }
        Ok(())
    }

    /// Copy of this manifest with every group label removed.
    pub fn without_groups(&self) -> Self {
        let mut m = self.clone();
        for e in &mut m.entries {
            e.group = None;
        }
        m
    }
}

/// Appends synthesized training images to `base`, leaving base entries untouched.
pub fn merge(base: &DatasetManifest, synthesized: &[LabeledImage]) -> Result<DatasetManifest> {
    let mut ids: HashSet<&str> = base.entries.iter().map(|e| e.id.as_str()).collect();
    for s in synthesized {
        if s.split != Split::Train {
            return Err(Error::Merge(format!(
                "{}: synthesized images must be in the train split (got {})",
                s.id, s.split
            )));
        }
        if s.provenance != Provenance::Synthesized {
            return Err(Error::Merge(format!("{}: provenance is not `synthesized`", s.id)));
        }
        if s.label >= base.n_classes() {
            return Err(Error::Merge(format!("{}: label {} out of range", s.id, s.label)));
        }
        if !ids.insert(s.id.as_str()) {
            return Err(Error::Merge(format!("id collision on {}", s.id)));
        }
    }
    let mut merged = base.clone();
    merged.entries.extend(synthesized.iter().cloned());
    Ok(merged)
}

/// Count of images per (label, attribute) cell within one split.
pub type GroupCounts = BTreeMap<Group, usize>;

pub fn group_counts(manifest: &DatasetManifest, split: Split) -> Result<GroupCounts> {
    let missing: Vec<&str> = manifest
        .split(split)
        .filter(|e| e.group.is_none())
        .map(|e| e.id.as_str())
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(20).copied().collect();
        return Err(Error::Report(format!(
            "{} {split} entries lack group labels: {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > shown.len() { ", ..." } else { "" }
        )));
    }
    let mut counts = GroupCounts::new();
    for e in manifest.split(split) {
        *counts.entry(e.group.expect("checked")).or_insert(0) += 1;
    }
    Ok(counts)
}
