//! Attention statistics (mean attention distance, pairwise head KL) and image
//! exports for reconstructions and mask overlays.

use std::path::Path;

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::{Branch, DualBranchModel};
use crate::error::{Error, Result};
use crate::facedata::{FaceImage, PatchRegionTable};
use crate::masking::MaskPair;
use crate::objectives::{patch_stats, PIXEL_NORM_EPS};

pub const KL_FLOOR: f64 = 1e-8;
const ROW_SUM_TOL: f64 = 1e-5;

/// Patch-grid geometry of an attention map. `class_token` marks a leading
/// token without spatial position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub class_token: bool,
}

impl Grid {
    pub fn patches(&self) -> usize {
        self.width * self.height
    }

    pub fn tokens(&self) -> usize {
        self.patches() + usize::from(self.class_token)
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (ax, ay) = ((a % self.width) as f64, (a / self.width) as f64);
        let (bx, by) = ((b % self.width) as f64, (b / self.width) as f64);
        ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt()
    }

    pub fn diameter(&self) -> f64 {
        (((self.width - 1).pow(2) + (self.height - 1).pow(2)) as f64).sqrt()
    }
}

fn check_square(attn: &[f64], t: usize) -> Result<()> {
    if attn.len() != t * t {
        return Err(Error::DimensionMismatch(format!(
            "attention map has {} entries, expected {t}x{t}",
            attn.len()
        )));
    }
    Ok(())
}

/// Spatial sub-map: drops the class-token row and column and renormalizes each
/// remaining row.
fn spatial_rows(attn: &[f64], grid: &Grid) -> Result<Vec<Vec<f64>>> {
    let t = grid.tokens();
    check_square(attn, t)?;
    let skip = usize::from(grid.class_token);
    let mut rows = Vec::with_capacity(grid.patches());
    for q in 0..t {
        let row = &attn[q * t..(q + 1) * t];
        if row.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Metric(format!("attention row {q} has a negative or NaN entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Metric(format!("attention row {q} sums to {sum}, not 1")));
        }
        if q < skip {
            continue;
        }
        let spatial = &row[skip..];
        let s: f64 = spatial.iter().sum();
        if s > 0.0 {
            rows.push(spatial.iter().map(|v| v / s).collect());
        } else {
            rows.push(vec![1.0 / grid.patches() as f64; grid.patches()]);
        }
    }
    Ok(rows)
}

/// Attention-weighted Euclidean distance (patch units) from each query to the
/// keys, averaged over queries. `attn` is one head's `T x T` map, row-major.
pub fn mean_attention_distance(attn: &[f64], grid: &Grid) -> Result<f64> {
    let rows = spatial_rows(attn, grid)?;
    let total: f64 = rows
        .iter()
        .enumerate()
        .map(|(q, row)| row.iter().enumerate().map(|(k, w)| w * grid.distance(q, k)).sum::<f64>())
        .sum();
    Ok(total / rows.len() as f64)
}

fn floored(row: &[f64]) -> Vec<f64> {
    let v: Vec<f64> = row.iter().map(|p| p.max(KL_FLOOR)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|p| p / s).collect()
}

/// KL(p ‖ q) after flooring both rows at 1e-8 and renormalizing.
pub fn row_kl(p: &[f64], q: &[f64]) -> f64 {
    let (p, q) = (floored(p), floored(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

/// Mean over query rows of KL(row_a ‖ row_b) on the spatial sub-maps.
pub fn head_kl_divergence(a: &[f64], b: &[f64], grid: &Grid) -> Result<f64> {
    let ra = spatial_rows(a, grid)?;
    let rb = spatial_rows(b, grid)?;
    Ok(ra.iter().zip(&rb).map(|(p, q)| row_kl(p, q)).sum::<f64>() / ra.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    /// Per head, averaged over samples.
    pub mean_distance: Vec<f64>,
    /// `kl[a][b]` = KL(head a ‖ head b), averaged over samples.
    pub kl: Vec<Vec<f64>>,
    /// Mean over off-diagonal head pairs.
    pub kl_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub grid: Grid,
    pub samples: usize,
    pub blocks: Vec<BlockStats>,
}

/// Statistics of attention maps shaped `(B, H, T, T)`, one per block.
pub fn attention_stats(maps: &[Tensor], grid: &Grid) -> Result<AttentionStats> {
    let mut blocks = Vec::with_capacity(maps.len());
    let mut samples = 0;
    for map in maps {
        let (b, h, t, t2) = map.dims4()?;
        if t != grid.tokens() || t2 != t {
            return Err(Error::DimensionMismatch(format!(
                "attention map {:?} does not match a grid of {} tokens",
                map.dims(),
                grid.tokens()
            )));
        }
        samples = b;
        let data: Vec<f64> = map.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let head = |s: usize, i: usize| &data[(s * h + i) * t * t..(s * h + i + 1) * t * t];
        let mut dist = vec![0.0; h];
        let mut kl = vec![vec![0.0; h]; h];
        for s in 0..b {
            for i in 0..h {
                dist[i] += mean_attention_distance(head(s, i), grid)? / b as f64;
                for j in 0..h {
                    if i != j {
                        kl[i][j] += head_kl_divergence(head(s, i), head(s, j), grid)? / b as f64;
                    }
                }
            }
        }
        let pairs = h * h.saturating_sub(1);
        let kl_mean = if pairs == 0 {
            0.0
        } else {
            kl.iter().flatten().sum::<f64>() / pairs as f64
        };
        blocks.push(BlockStats {
            mean_distance: dist,
            kl,
            kl_mean,
        });
    }
    Ok(AttentionStats {
        grid: *grid,
        samples,
        blocks,
    })
}

/// Encoder attention statistics for a batch of full images.
pub fn model_attention_stats(model: &DualBranchModel, patches: &Tensor, branch: Branch) -> Result<AttentionStats> {
    let cfg = model.config();
    let grid = Grid {
        width: cfg.grid(),
        height: cfg.grid(),
        class_token: cfg.use_class_token,
    };
    attention_stats(&model.encoder_attention(patches, branch)?, &grid)
}

/// Original, masked input and reconstruction with predictions pasted into
/// the masked patches only.
#[derive(Debug, Clone)]
pub struct ReconstructionPanel {
    pub original: RgbImage,
    pub masked: RgbImage,
    pub reconstruction: RgbImage,
}

impl ReconstructionPanel {
    /// The three images side by side.
    pub fn compose(&self) -> RgbImage {
        let (w, h) = self.original.dimensions();
        let mut out = RgbImage::new(3 * w, h);
        for (i, img) in [&self.original, &self.masked, &self.reconstruction].into_iter().enumerate() {
            image::imageops::replace(&mut out, img, (i as u32 * w) as i64, 0);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_png(&self.compose(), path)
    }
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}

const MASK_FILL: u8 = 128;

fn patch_pixels(width: usize, patch_size: usize, patch: usize) -> impl Iterator<Item = (u32, u32)> {
    let per_row = width / patch_size;
    let (px, py) = ((patch % per_row) * patch_size, (patch / per_row) * patch_size);
    (0..patch_size).flat_map(move |dy| (0..patch_size).map(move |dx| ((px + dx) as u32, (py + dy) as u32)))
}

/// Runs the online encoder and pixel decoder on one image. With
/// `normalized_targets`, each predicted patch is mapped back to pixels with
/// the mean and variance of the corresponding input patch.
pub fn reconstruction_panel(
    model: &DualBranchModel,
    image: &FaceImage,
    pair: &MaskPair,
    normalized_targets: bool,
) -> Result<ReconstructionPanel> {
    let cfg = model.config();
    let p = cfg.patch_size;
    let patches = image.patchify(p)?;
    let x = model.patches_tensor(std::slice::from_ref(&patches))?;
    let masks = std::slice::from_ref(pair);
    let latent = model.encode_visible(&x, masks)?;
    let pred: Vec<f64> = model
        .decode_pixels(&latent, masks)?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1()?;
    let dim = cfg.patch_dim();
    let original = image.to_rgb8();
    let mut masked = original.clone();
    let mut reconstruction = original.clone();
    for patch in pair.masked_indices() {
        let input: Vec<f64> = patches[patch * dim..(patch + 1) * dim].iter().map(|&v| v as f64).collect();
        let (mean, var) = patch_stats(&input);
        let scale = (var + PIXEL_NORM_EPS).sqrt();
        let out = &pred[patch * dim..(patch + 1) * dim];
        for (i, (px, py)) in patch_pixels(image.width(), p, patch).enumerate() {
            masked.put_pixel(px, py, Rgb([MASK_FILL; 3]));
            let mut rgb = [0u8; 3];
            for (c, v) in rgb.iter_mut().enumerate() {
                let value = out[i * 3 + c];
                let value = if normalized_targets { value * scale + mean } else { value };
                *v = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            reconstruction.put_pixel(px, py, Rgb(rgb));
        }
    }
    Ok(ReconstructionPanel {
        original,
        masked,
        reconstruction,
    })
}

pub fn export_reconstruction(
    model: &DualBranchModel,
    image: &FaceImage,
    pair: &MaskPair,
    normalized_targets: bool,
    path: &Path,
) -> Result<ReconstructionPanel> {
    let panel = reconstruction_panel(model, image, pair, normalized_targets)?;
    panel.save(path)?;
    Ok(panel)
}

const OUTLINE: Rgb<u8> = Rgb([255, 0, 0]);

/// Masked patches darkened to a quarter of their value; patches of the
/// covered region get a one-pixel outline along their outer boundary.
pub fn mask_overlay(image: &FaceImage, table: &PatchRegionTable, pair: &MaskPair) -> Result<RgbImage> {
    let p = table.patch_size();
    if pair.len() != table.len() || image.width() != table.grid_width() * p || image.height() != table.grid_height() * p {
        return Err(Error::DimensionMismatch(
            "image, region table and mask disagree in size".into(),
        ));
    }
    let mut out = image.to_rgb8();
    for patch in pair.masked_indices() {
        for (x, y) in patch_pixels(image.width(), p, patch) {
            let px = out.get_pixel_mut(x, y);
            for v in px.0.iter_mut() {
                *v /= 4;
            }
        }
    }
    let gw = table.grid_width();
    let in_fr = |gx: isize, gy: isize| {
        gx >= 0
            && gy >= 0
            && (gx as usize) < gw
            && (gy as usize) < table.grid_height()
            && pair.region_mask.get(gy as usize * gw + gx as usize)
    };
    for patch in pair.region_mask.indices() {
        let (gx, gy) = ((patch % gw) as isize, (patch / gw) as isize);
        for (x, y) in patch_pixels(image.width(), p, patch) {
            let (lx, ly) = (x as usize % p, y as usize % p);
            let edge = (lx == 0 && !in_fr(gx - 1, gy))
                || (lx == p - 1 && !in_fr(gx + 1, gy))
                || (ly == 0 && !in_fr(gx, gy - 1))
                || (ly == p - 1 && !in_fr(gx, gy + 1));
            if edge {
                out.put_pixel(x, y, OUTLINE);
            }
        }
    }
    Ok(out)
}

pub fn export_mask_overlay(image: &FaceImage, table: &PatchRegionTable, pair: &MaskPair, path: &Path) -> Result<RgbImage> {
    let out = mask_overlay(image, table, pair)?;
    save_png(&out, path)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facedata::Region;
    use crate::masking::BinaryMask;

    fn grid(w: usize, h: usize) -> Grid {
        Grid {
            width: w,
            height: h,
            class_token: false,
        }
    }

    fn identity(n: usize) -> Vec<f64> {
        (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn identity_attention_has_zero_distance() {
        assert_eq!(mean_attention_distance(&identity(9), &grid(3, 3)).unwrap(), 0.0);
    }

    #[test]
    fn uniform_attention_on_2x2() {
        let u = vec![0.25; 16];
        // each query: two neighbours at 1, one diagonal at sqrt(2), itself at 0
        let expected = (2.0 + 2f64.sqrt()) / 4.0;
        assert!((mean_attention_distance(&u, &grid(2, 2)).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn farthest_corner_gives_the_diagonal() {
        let g = grid(3, 3);
        let mut attn = vec![0.0; 81];
        for q in 0..9 {
            attn[q * 9 + 8] = 1.0;
        }
        attn[8 * 9 + 8] = 0.0;
        attn[8 * 9] = 1.0;
        // only the corners 0 and 8 reach the diagonal; check corner query 0
        let rows = spatial_rows(&attn, &g).unwrap();
        let d0: f64 = rows[0].iter().enumerate().map(|(k, w)| w * g.distance(0, k)).sum();
        assert!((d0 - g.diameter()).abs() < 1e-15);
    }

    #[test]
    fn class_token_is_excluded_and_rows_renormalized() {
        let g = Grid {
            width: 2,
            height: 1,
            class_token: true,
        };
        // cls row ignored; patch rows put half their mass on cls
        let attn = vec![
            1.0, 0.0, 0.0, //
            0.5, 0.0, 0.5, //
            0.5, 0.5, 0.0,
        ];
        assert!((mean_attention_distance(&attn, &g).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rows_must_be_distributions() {
        assert!(mean_attention_distance(&[0.5, 0.4, 0.5, 0.5], &grid(2, 1)).is_err());
        assert!(mean_attention_distance(&[1.0, 0.0], &grid(2, 1)).is_err());
    }

    #[test]
    fn kl_examples() {
        let g = grid(2, 2);
        let u = vec![0.25; 16];
        assert_eq!(head_kl_divergence(&u, &u, &g).unwrap(), 0.0);
        // one-hot p against q with a zero where p has its mass
        let p = [1.0, 0.0, 0.0, 0.0];
        let q = [0.0, 0.5, 0.5, 0.0];
        let n = 4.0;
        let zp = 1.0 + (n - 1.0) * KL_FLOOR;
        let zq = 1.0 + 2.0 * KL_FLOOR;
        let (p1, pe) = (1.0 / zp, KL_FLOOR / zp);
        let (qe, qh) = (KL_FLOOR / zq, 0.5 / zq);
        let expected = p1 * (p1 / qe).ln() + 2.0 * pe * (pe / qh).ln() + pe * (pe / qe).ln();
        assert!((row_kl(&p, &q) - expected).abs() < 1e-12);
        assert!(row_kl(&p, &q) > 15.0);
    }

    fn toy_image(w: usize, h: usize) -> FaceImage {
        let data = (0..w * h * 3).map(|i| 0.3 + 0.5 * ((i * 37 % 101) as f32 / 101.0)).collect();
        FaceImage::new(w, h, data).unwrap()
    }

    #[test]
    fn overlay_darkens_exactly_the_masked_patches() {
        let table = PatchRegionTable::from_primary(
            2,
            2,
            &[Region::Eyes, Region::Skin, Region::Skin, Region::Background],
        )
        .unwrap();
        let image = toy_image(2, 2);
        let none = MaskPair::unmasked(4);
        assert_eq!(mask_overlay(&image, &table, &none).unwrap(), image.to_rgb8());

        let pair = MaskPair {
            mask: BinaryMask::from_indices(4, [0, 3]),
            region_mask: BinaryMask::from_indices(4, [0]),
            covered: Some(Region::Eyes),
            extreme: false,
        };
        let out = mask_overlay(&image, &table, &pair).unwrap();
        let orig = image.to_rgb8();
        let changed = out.pixels().zip(orig.pixels()).filter(|(a, b)| a != b).count();
        assert_eq!(changed, pair.masked() * table.patch_size().pow(2));
        assert_eq!(*out.get_pixel(0, 0), OUTLINE);
    }
}
