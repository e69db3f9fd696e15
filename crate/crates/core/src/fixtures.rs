//! Procedurally drawn synthetic faces with matching parsing maps, for smoke
//! runs and tests without real face data.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::facedata::{fine, DatasetManifest, FaceImage, FaceSample, ManifestRecord, ParsingMap, RegionTaxonomy, Split};
use crate::rng;

/// Pixel radius of the face-boundary band inside the skin.
const BOUNDARY_BAND: f64 = 2.0;

fn inside_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

fn base_color(label: u8) -> [f32; 3] {
    match label {
        fine::BACKGROUND => [0.25, 0.45, 0.35],
        fine::HAIR => [0.20, 0.13, 0.08],
        fine::RIGHT_EYEBROW | fine::LEFT_EYEBROW => [0.15, 0.10, 0.07],
        fine::RIGHT_EYE | fine::LEFT_EYE => [0.95, 0.95, 0.95],
        fine::NOSE => [0.80, 0.58, 0.48],
        fine::UPPER_LIP | fine::LOWER_LIP => [0.70, 0.30, 0.32],
        fine::INNER_MOUTH => [0.30, 0.05, 0.08],
        _ => [0.88, 0.68, 0.56],
    }
}

/// Draws face `index` of a fixture set. `label` 0 faces carry a visible
/// artifact (tinted, striped skin) so the two classes are separable.
pub fn synth_face(size: usize, seed: u64, index: usize, label: Option<u8>) -> Result<FaceSample> {
    if size < 16 {
        return Err(Error::Config(format!("fixture size {size} is below the 16px minimum")));
    }
    let taxonomy = RegionTaxonomy::standard();
    let mut rng = rng::stream("fixture", &[seed, index as u64]);
    let s = size as f64;
    let mut j = |scale: f64| rng.random_range(-scale..=scale) * s;
    let (cx, cy) = (s / 2.0 + j(0.04), s / 2.0 + 0.04 * s + j(0.03));
    let (rx, ry) = (0.30 * s + j(0.03), 0.38 * s + j(0.03));
    let hair_drop = 0.12 * s + j(0.03);
    let eye_dx = 0.13 * s + j(0.015);
    let eye_y = cy - 0.08 * s + j(0.015);
    let mouth_y = cy + 0.20 * s + j(0.015);
    let mut labels = vec![fine::BACKGROUND; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut l = fine::BACKGROUND;
            if inside_ellipse(fx, fy, cx, cy - 0.05 * s, rx * 1.15, ry * 1.1) && fy < cy - ry + hair_drop + 0.25 * s {
                l = fine::HAIR;
            }
            if inside_ellipse(fx, fy, cx, cy, rx, ry) && fy > cy - ry + hair_drop {
                l = fine::SKIN;
                let eye = |ex: f64| inside_ellipse(fx, fy, ex, eye_y, 0.06 * s, 0.03 * s);
                let brow = |ex: f64| (fx - ex).abs() < 0.07 * s && (fy - (eye_y - 0.07 * s)).abs() < 0.015 * s;
                if brow(cx - eye_dx) {
                    l = fine::RIGHT_EYEBROW;
                } else if brow(cx + eye_dx) {
                    l = fine::LEFT_EYEBROW;
                } else if eye(cx - eye_dx) {
                    l = fine::RIGHT_EYE;
                } else if eye(cx + eye_dx) {
                    l = fine::LEFT_EYE;
                } else if (fx - cx).abs() < 0.04 * s && fy > eye_y + 0.03 * s && fy < mouth_y - 0.06 * s {
                    l = fine::NOSE;
                } else if (fx - cx).abs() < 0.10 * s && (fy - mouth_y).abs() < 0.045 * s {
                    l = if fy < mouth_y - 0.012 * s {
                        fine::UPPER_LIP
                    } else if fy > mouth_y + 0.012 * s {
                        fine::LOWER_LIP
                    } else {
                        fine::INNER_MOUTH
                    };
                }
            }
            labels[y * size + x] = l;
        }
    }
    let band = BOUNDARY_BAND.ceil() as isize;
    let mut parsed = labels.clone();
    for y in 0..size as isize {
        for x in 0..size as isize {
            if labels[(y as usize) * size + x as usize] != fine::SKIN {
                continue;
            }
            let mut near_bg = false;
            let mut near_hair = false;
            for dy in -band..=band {
                for dx in -band..=band {
                    let (nx, ny) = (x + dx, y + dy);
                    if ((dx * dx + dy * dy) as f64).sqrt() > BOUNDARY_BAND
                        || nx < 0
                        || ny < 0
                        || nx >= size as isize
                        || ny >= size as isize
                    {
                        continue;
                    }
                    match labels[ny as usize * size + nx as usize] {
                        fine::BACKGROUND => near_bg = true,
                        fine::HAIR => near_hair = true,
                        _ => {}
                    }
                }
            }
            if near_bg {
                parsed[y as usize * size + x as usize] = fine::SKIN_BACKGROUND;
            } else if near_hair {
                parsed[y as usize * size + x as usize] = fine::SKIN_HAIR;
            }
        }
    }
    let shade: f32 = rng.random_range(0.85..1.1);
    let fake = label == Some(0);
    let mut data = Vec::with_capacity(size * size * 3);
    for (i, &l) in parsed.iter().enumerate() {
        let (x, y) = (i % size, i / size);
        let mut c = base_color(l);
        let skin_like = matches!(l, fine::SKIN | fine::SKIN_BACKGROUND | fine::SKIN_HAIR | fine::NOSE);
        if fake && skin_like {
            let stripe = if (x + y) % 4 < 2 { 0.18 } else { -0.18 };
            c = [c[0] - 0.25 + stripe, c[1] + 0.05 + stripe, c[2] + 0.30 + stripe];
        }
        for v in c {
            let noise: f32 = rng.random_range(-0.04..0.04);
            data.push((v * shade + noise).clamp(0.0, 1.0));
        }
    }
    let image = FaceImage::new(size, size, data)?;
    let parsing = ParsingMap::new(size, size, parsed, &taxonomy)?;
    FaceSample::new(fixture_image_path(index).to_string_lossy(), image, parsing, label)
}

/// Manifest-relative image path of fixture `index`; also the sample id, so
/// in-memory and on-disk fixtures draw identical masks.
pub fn fixture_image_path(index: usize) -> PathBuf {
    PathBuf::from("images").join(format!("face_{index:03}.png"))
}

/// In-memory fixture set; labels alternate 1, 0 when `labeled`.
pub fn synth_faces(n: usize, size: usize, seed: u64, labeled: bool) -> Result<Vec<FaceSample>> {
    (0..n)
        .map(|i| synth_face(size, seed, i, labeled.then_some(u8::from(i % 2 == 0))))
        .collect()
}

/// Writes `images/*.png`, `parsing/*.fspm` and `manifest.json` under `dir`.
pub fn write_fixtures(dir: &Path, n: usize, size: usize, seed: u64, labeled: bool) -> Result<(PathBuf, DatasetManifest)> {
    if n == 0 {
        return Err(Error::Config("fixture count must be positive".into()));
    }
    for sub in ["images", "parsing"] {
        let d = dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(n);
    for (i, sample) in synth_faces(n, size, seed, labeled)?.into_iter().enumerate() {
        let image = fixture_image_path(i);
        let parsing = PathBuf::from("parsing").join(format!("face_{i:03}.fspm"));
        sample.image.to_rgb8().save(dir.join(&image))?;
        sample.parsing.save_fspm(&dir.join(&parsing))?;
        records.push(ManifestRecord {
            image,
            parsing,
            label: sample.label,
        });
    }
    let manifest = DatasetManifest {
        split: Split::Train,
        records,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    manifest.validate()?;
    Ok((path, manifest))
}
