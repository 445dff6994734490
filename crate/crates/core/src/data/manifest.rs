//! `manifest.json` and the in-memory dataset it describes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::netpbm::{read_pgm, read_ppm};
use super::synthetic::Placement;
use crate::error::{Error, Result};
use crate::tensor::{LabelTensor, Tensor};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::config(format!("unknown split {s:?} (train|val)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the dataset root.
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    pub split: Split,
    /// Generator log; empty for datasets not made by `generate_synthetic`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub placements: Vec<Placement>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub nb_classes: usize,
    /// (H, W)
    pub image_size: [usize; 2],
    pub labeled_fraction: f64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, split: Split, labeled: Option<bool>) -> usize {
        self.entries
            .iter()
            .filter(|e| e.split == split && labeled.is_none_or(|l| e.mask.is_some() == l))
            .count()
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::data(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.nb_classes < 2 || self.nb_classes > 256 {
            return Err(Error::data(format!("nb_classes {} outside 2..=256", self.nb_classes)));
        }
        if self.image_size.contains(&0) {
            return Err(Error::data("image_size must be positive"));
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::data(format!(
                "labeled_fraction {} outside (0,1]",
                self.labeled_fraction
            )));
        }
        for e in &self.entries {
            for p in std::iter::once(&e.image).chain(&e.mask) {
                if Path::new(p).is_absolute() || p.split('/').any(|c| c == "..") {
                    return Err(Error::data(format!("manifest path {p:?} must stay inside the dataset")));
                }
            }
            if e.split == Split::Val && e.mask.is_none() {
                return Err(Error::data(format!("validation entry {} has no mask", e.image)));
            }
        }
        let train = self.count(Split::Train, None);
        if train > 0 {
            let actual = self.count(Split::Train, Some(true)) as f64 / train as f64;
            if (actual - self.labeled_fraction).abs() > 1.0 / train as f64 {
                return Err(Error::data(format!(
                    "labeled train share {actual} disagrees with labeled_fraction {}",
                    self.labeled_fraction
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest =
            serde_json::from_str(text).map_err(|e| Error::data(format!("bad manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }
}

/// A dataset loaded into memory. Masks are read only for entries that have
/// one, so unlabeled entries never touch label files.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
    images: Vec<Tensor>,
    masks: Vec<Option<LabelTensor>>,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = DatasetManifest::read(&root)?;
        let [h, w] = manifest.image_size;
        let mut images = Vec::with_capacity(manifest.entries.len());
        let mut masks = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let img = read_ppm(root.join(&e.image))?;
            if img.shape() != [3, h, w] {
                return Err(Error::data(format!("{} is {:?}, expected [3,{h},{w}]", e.image, img.shape())));
            }
            images.push(img);
            let mask = match &e.mask {
                Some(p) => {
                    let m = read_pgm(root.join(p))?;
                    if m.shape() != [h, w] {
                        return Err(Error::data(format!("{p} is {:?}, expected [{h},{w}]", m.shape())));
                    }
                    m.check_below(manifest.nb_classes)?;
                    Some(m)
                }
                None => None,
            };
            masks.push(mask);
        }
        Ok(Dataset {
            root,
            manifest,
            images,
            masks,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn nb_classes(&self) -> usize {
        self.manifest.nb_classes
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &Tensor {
        &self.images[i]
    }

    pub fn mask(&self, i: usize) -> Option<&LabelTensor> {
        self.masks[i].as_ref()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.manifest.entries[i].split == split).collect()
    }

    /// Train entries with a mask.
    pub fn labeled_pool(&self) -> Vec<usize> {
        self.indices(Split::Train).into_iter().filter(|&i| self.masks[i].is_some()).collect()
    }

    /// Train entries without a mask.
    pub fn unlabeled_pool(&self) -> Vec<usize> {
        self.indices(Split::Train).into_iter().filter(|&i| self.masks[i].is_none()).collect()
    }
}
