use std::io::Write;
use std::path::Path;

use super::taxonomy::{Region, RegionSet, RegionTaxonomy};
use crate::error::{Error, Result};

/// Magic bytes of the binary parsing-map stream.
pub const FSPM_MAGIC: &[u8; 4] = b"FSPM";
pub const FSPM_VERSION: u8 = 1;
const FSPM_HEADER_LEN: usize = 4 + 1 + 2 + 2;

/// Per-pixel fine label grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsingMap {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl ParsingMap {
    /// Builds a map after checking every label against the taxonomy.
    pub fn new(width: usize, height: usize, labels: Vec<u8>, taxonomy: &RegionTaxonomy) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch(format!(
                "parsing map must be non-empty, got {width}x{height}"
            )));
        }
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} map needs {} labels, got {}",
                width * height,
                labels.len()
            )));
        }
        if let Some(pos) = labels.iter().position(|l| !taxonomy.is_declared(*l)) {
            return Err(Error::OutOfTaxonomyLabel {
                label: labels[pos],
                x: pos % width,
                y: pos / width,
            });
        }
        Ok(ParsingMap { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, label: u8, taxonomy: &RegionTaxonomy) -> Result<Self> {
        ParsingMap::new(width, height, vec![label; width * height], taxonomy)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Checks that the map tiles exactly into `patch_size` squares.
    pub fn check_patch_grid(&self, patch_size: usize) -> Result<()> {
        if patch_size == 0 || !self.width.is_multiple_of(patch_size) || !self.height.is_multiple_of(patch_size) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} map is not divisible by patch size {patch_size}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Serializes to the binary stream format.
    pub fn to_fspm_bytes(&self) -> Result<Vec<u8>> {
        let w = u16::try_from(self.width)
            .map_err(|_| Error::DimensionMismatch(format!("width {} exceeds u16", self.width)))?;
        let h = u16::try_from(self.height)
            .map_err(|_| Error::DimensionMismatch(format!("height {} exceeds u16", self.height)))?;
        let mut out = Vec::with_capacity(FSPM_HEADER_LEN + self.labels.len());
        out.extend_from_slice(FSPM_MAGIC);
        out.push(FSPM_VERSION);
        out.extend_from_slice(&w.to_le_bytes());
        out.extend_from_slice(&h.to_le_bytes());
        out.extend_from_slice(&self.labels);
        Ok(out)
    }

    pub fn from_fspm_bytes(bytes: &[u8], taxonomy: &RegionTaxonomy) -> Result<Self> {
        if bytes.len() < FSPM_HEADER_LEN || &bytes[..4] != FSPM_MAGIC {
            return Err(Error::MalformedParsingMap("missing FSPM header".into()));
        }
        if bytes[4] != FSPM_VERSION {
            return Err(Error::MalformedParsingMap(format!(
                "unsupported FSPM version {}",
                bytes[4]
            )));
        }
        let width = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
        let height = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
        let payload = &bytes[FSPM_HEADER_LEN..];
        if payload.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "header declares {width}x{height} but payload holds {} labels",
                payload.len()
            )));
        }
        ParsingMap::new(width, height, payload.to_vec(), taxonomy)
    }

    pub fn save_fspm(&self, path: &Path) -> Result<()> {
        let bytes = self.to_fspm_bytes()?;
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Writes the 8-bit single-channel image form.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .ok_or_else(|| Error::DimensionMismatch("label buffer does not match dimensions".into()))?;
        img.save(path)?;
        Ok(())
    }
}

/// Loads a parsing map, detecting the binary stream format by its magic bytes
/// and otherwise decoding an 8-bit single-channel image.
pub fn load_parsing_map(path: &Path, taxonomy: &RegionTaxonomy) -> Result<ParsingMap> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(FSPM_MAGIC) {
        return ParsingMap::from_fspm_bytes(&bytes, taxonomy);
    }
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::MalformedParsingMap(format!("{}: {e}", path.display())))?;
    if !matches!(img, image::DynamicImage::ImageLuma8(_)) {
        return Err(Error::MalformedParsingMap(format!(
            "{}: expected an 8-bit single-channel image, got {:?}",
            path.display(),
            img.color()
        )));
    }
    let luma = img.into_luma8();
    let (w, h) = luma.dimensions();
    ParsingMap::new(w as usize, h as usize, luma.into_raw(), taxonomy)
}

/// Patch-to-region membership for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRegionTable {
    grid_width: usize,
    grid_height: usize,
    patch_size: usize,
    intersects: Vec<RegionSet>,
    primary: Vec<Region>,
    pixel_counts: Vec<[u32; Region::COUNT]>,
}

impl PatchRegionTable {
    /// Assembles a table directly from per-patch coarse pixel counts.
    /// Intersections and primary regions are derived from the counts.
    pub fn from_counts(
        grid_width: usize,
        grid_height: usize,
        patch_size: usize,
        pixel_counts: Vec<[u32; Region::COUNT]>,
    ) -> Result<Self> {
        if pixel_counts.len() != grid_width * grid_height {
            return Err(Error::DimensionMismatch(format!(
                "{} count rows for a {grid_width}x{grid_height} grid",
                pixel_counts.len()
            )));
        }
        let area = (patch_size * patch_size) as u32;
        let mut intersects = Vec::with_capacity(pixel_counts.len());
        let mut primary = Vec::with_capacity(pixel_counts.len());
        for (i, counts) in pixel_counts.iter().enumerate() {
            if counts.iter().sum::<u32>() != area {
                return Err(Error::DimensionMismatch(format!(
                    "patch {i} counts do not sum to {area}"
                )));
            }
            intersects.push(
                Region::ALL
                    .into_iter()
                    .filter(|r| counts[r.index()] > 0)
                    .collect::<RegionSet>(),
            );
            // strict `>` keeps the earliest region in taxonomy order on ties
            let mut best = Region::ALL[0];
            for r in Region::ALL {
                if counts[r.index()] > counts[best.index()] {
                    best = r;
                }
            }
            primary.push(best);
        }
        Ok(PatchRegionTable {
            grid_width,
            grid_height,
            patch_size,
            intersects,
            primary,
            pixel_counts,
        })
    }

    /// Table whose patches each lie entirely in one region.
    pub fn from_primary(grid_width: usize, grid_height: usize, regions: &[Region]) -> Result<Self> {
        let counts = regions
            .iter()
            .map(|r| {
                let mut c = [0u32; Region::COUNT];
                c[r.index()] = 1;
                c
            })
            .collect();
        PatchRegionTable::from_counts(grid_width, grid_height, 1, counts)
    }

    pub fn len(&self) -> usize {
        self.primary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }

    pub fn grid_width(&self) -> usize {
        self.grid_width
    }

    pub fn grid_height(&self) -> usize {
        self.grid_height
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn intersects(&self, patch: usize) -> RegionSet {
        self.intersects[patch]
    }

    pub fn primary_region(&self, patch: usize) -> Region {
        self.primary[patch]
    }

    pub fn primary_regions(&self) -> &[Region] {
        &self.primary
    }

    pub fn pixel_counts(&self, patch: usize) -> &[u32; Region::COUNT] {
        &self.pixel_counts[patch]
    }

    /// Patches whose pixels touch `region`.
    pub fn patches_touching(&self, region: Region) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.intersects[i].contains(region)).collect()
    }

    /// Patches owned by `region` in the majority partition.
    pub fn patches_owned_by(&self, region: Region) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.primary[i] == region).collect()
    }

    /// Coverable regions touched by at least one patch, in taxonomy order.
    pub fn coverable_present(&self) -> Vec<Region> {
        Region::ALL
            .into_iter()
            .filter(|r| r.is_coverable() && self.intersects.iter().any(|s| s.contains(*r)))
            .collect()
    }
}

/// Splits a parsing map into patches and records which coarse regions each
/// patch touches and which region owns most of its pixels.
pub fn patchify_regions(
    pm: &ParsingMap,
    patch_size: usize,
    taxonomy: &RegionTaxonomy,
) -> Result<PatchRegionTable> {
    pm.check_patch_grid(patch_size)?;
    let gw = pm.width / patch_size;
    let gh = pm.height / patch_size;
    let mut counts = vec![[0u32; Region::COUNT]; gw * gh];
    for y in 0..pm.height {
        let row = &pm.labels[y * pm.width..(y + 1) * pm.width];
        let base = (y / patch_size) * gw;
        for (x, &label) in row.iter().enumerate() {
            let region = taxonomy.coarse_of(label).ok_or(Error::OutOfTaxonomyLabel { label, x, y })?;
            counts[base + x / patch_size][region.index()] += 1;
        }
    }
    PatchRegionTable::from_counts(gw, gh, patch_size, counts)
}
