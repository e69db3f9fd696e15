//! Face crops, parsing maps and the datasets built from them.

mod image;
mod parsing;
mod taxonomy;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use self::image::{FaceImage, CHANNELS};
pub use self::parsing::{load_parsing_map, patchify_regions, ParsingMap, PatchRegionTable, FSPM_MAGIC, FSPM_VERSION};
pub use self::taxonomy::{fine, Region, RegionSet, RegionTaxonomy};
use crate::error::{Error, Result};

/// One face crop with its parsing map.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceSample {
    pub id: String,
    pub image: FaceImage,
    pub parsing: ParsingMap,
    pub label: Option<u8>,
}

impl FaceSample {
    pub fn new(id: impl Into<String>, image: FaceImage, parsing: ParsingMap, label: Option<u8>) -> Result<Self> {
        let id = id.into();
        if image.width() != parsing.width() || image.height() != parsing.height() {
            return Err(Error::DimensionMismatch(format!(
                "sample {id}: image is {}x{} but parsing map is {}x{}",
                image.width(),
                image.height(),
                parsing.width(),
                parsing.height()
            )));
        }
        Ok(FaceSample { id, image, parsing, label })
    }

    pub fn region_table(&self, patch_size: usize, taxonomy: &RegionTaxonomy) -> Result<PatchRegionTable> {
        patchify_regions(&self.parsing, patch_size, taxonomy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub parsing: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

/// List of samples making up one dataset split. Relative paths resolve against
/// the directory holding the manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    pub records: Vec<ManifestRecord>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Checks that referenced files exist and that labels are either present on
    /// every record or on none.
    pub fn validate(&self) -> Result<()> {
        for (i, rec) in self.records.iter().enumerate() {
            for p in [&rec.image, &rec.parsing] {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Manifest(format!("record {i}: missing file {}", full.display())));
                }
            }
            if let Some(l) = rec.label {
                if l > 1 {
                    return Err(Error::Manifest(format!("record {i}: label {l} is not binary")));
                }
            }
        }
        let labeled = self.records.iter().filter(|r| r.label.is_some()).count();
        if labeled != 0 && labeled != self.records.len() {
            return Err(Error::Manifest(format!(
                "{labeled} of {} records carry labels; expected all or none",
                self.records.len()
            )));
        }
        Ok(())
    }

    pub fn is_labeled(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.label.is_some())
    }

    /// Stable identifier of a record: its image path relative to the manifest.
    pub fn sample_id(&self, index: usize) -> String {
        self.records[index].image.to_string_lossy().into_owned()
    }
}

/// Reads the requested records. No augmentation is applied.
pub fn load_batch(manifest: &DatasetManifest, indices: &[usize], taxonomy: &RegionTaxonomy) -> Result<Vec<FaceSample>> {
    indices
        .iter()
        .map(|&index| {
            let rec = manifest.records.get(index).ok_or(Error::IndexOutOfRange {
                index,
                len: manifest.len(),
            })?;
            let image = FaceImage::load(&manifest.resolve(&rec.image))?;
            let parsing = load_parsing_map(&manifest.resolve(&rec.parsing), taxonomy)?;
            FaceSample::new(manifest.sample_id(index), image, parsing, rec.label)
        })
        .collect()
}
