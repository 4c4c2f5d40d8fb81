//! Dataset manifest (JSON, schema version 1) and the in-memory dataset.
//!
//! ```json
//! {
//!   "version": 1,
//!   "entries": [
//!     {
//!       "id": "img000",
//!       "image_path": "img000.ppm",
//!       "ground_truth": [0.61, 0.57, 0.55],
//!       "fold": 0,
//!       "exclusion_rects": [[0, 0, 16, 16]],
//!       "gt_map_path": "img000_gt.ppm"
//!     }
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_illuminant_map, load_ppm16, Illuminant, LinearImage};
use crate::local::IlluminantMap;
use crate::patch::{ExclusionMask, Rect};

pub const MANIFEST_VERSION: u32 = 1;

/// Number of cross-validation folds.
pub const FOLDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub ground_truth: [f64; 3],
    pub fold: usize,
    #[serde(default)]
    pub exclusion_rects: Vec<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_map_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Self {
            version: MANIFEST_VERSION,
            entries,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        for e in &m.entries {
            if e.fold >= FOLDS {
                return Err(Error::Dataset(format!("{}: fold {} outside 0..{FOLDS}", e.id, e.fold)));
            }
            Illuminant::normalize(e.ground_truth)
                .map_err(|_| Error::Dataset(format!("{}: ground truth {:?} is not a valid illuminant", e.id, e.ground_truth)))?;
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// One loaded image with its annotations.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: LinearImage,
    pub illuminant: Illuminant,
    pub fold: usize,
    pub mask: ExclusionMask,
    /// Per-pixel ground truth for spatially varying illumination.
    pub gt_map: Option<IlluminantMap>,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads every image referenced by the manifest at `path`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest = DatasetManifest::read(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_manifest(&manifest, &base)
    }

    pub fn from_manifest(manifest: &DatasetManifest, base: &Path) -> Result<Self> {
        let resolve = |p: &str| -> PathBuf {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                let image = load_ppm16(resolve(&e.image_path))?;
                let mask = ExclusionMask::new(
                    e.exclusion_rects
                        .iter()
                        .map(|r| Rect::new(r[0], r[1], r[2], r[3]))
                        .collect(),
                );
                mask.validate(image.width(), image.height())?;
                let gt_map = e
                    .gt_map_path
                    .as_ref()
                    .map(|p| load_illuminant_map(resolve(p), 1))
                    .transpose()?;
                Ok(Sample {
                    id: e.id.clone(),
                    illuminant: Illuminant::normalize(e.ground_truth)?,
                    fold: e.fold,
                    mask,
                    gt_map,
                    image,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.samples.len()).filter(|i| self.samples[*i].fold == fold).collect()
    }

    /// Fails unless every fold in `0..FOLDS` has at least one image.
    pub fn check_folds(&self) -> Result<()> {
        let present: BTreeSet<usize> = self.samples.iter().map(|s| s.fold).collect();
        for f in 0..FOLDS {
            if !present.contains(&f) {
                return Err(Error::Dataset(format!("fold {f} has no images")));
            }
        }
        if let Some(s) = self.samples.iter().find(|s| s.fold >= FOLDS) {
            return Err(Error::Dataset(format!("{}: fold {} outside 0..{FOLDS}", s.id, s.fold)));
        }
        Ok(())
    }
}
