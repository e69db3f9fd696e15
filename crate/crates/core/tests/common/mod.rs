#![allow(dead_code)]

use fsfm::backbone::BackboneConfig;
use fsfm::facedata::{fine, ParsingMap, Region, RegionTaxonomy};
use fsfm::pretrainer::TrainConfig;
use rand::Rng;

/// Random parsing map: a skin rectangle over background with a handful of
/// random labelled rectangles on top. Always contains a coverable label.
pub fn random_parsing_map<R: Rng>(rng: &mut R, size: usize) -> ParsingMap {
    let taxonomy = RegionTaxonomy::standard();
    loop {
        let mut labels = vec![fine::BACKGROUND; size * size];
        let rect = |rng: &mut R, labels: &mut Vec<u8>, label: u8, min: usize| {
            let w = rng.random_range(min..=size);
            let h = rng.random_range(min..=size);
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    labels[y * size + x] = label;
                }
            }
        };
        rect(rng, &mut labels, fine::SKIN, size / 2);
        for _ in 0..rng.random_range(1..=6) {
            let label = rng.random_range(2..fine::COUNT as u8);
            rect(rng, &mut labels, label, 1.max(size / 16));
        }
        let map = ParsingMap::new(size, size, labels, &taxonomy).unwrap();
        let has_coverable = map
            .labels()
            .iter()
            .any(|&l| taxonomy.coarse_of(l).is_some_and(Region::is_coverable));
        if has_coverable {
            return map;
        }
    }
}

/// Patches with at least one pixel of `region`, straight from the pixels.
pub fn touching_oracle(map: &ParsingMap, patch: usize, region: Region) -> Vec<usize> {
    let taxonomy = RegionTaxonomy::standard();
    let gw = map.width() / patch;
    let gh = map.height() / patch;
    let mut out = Vec::new();
    for gy in 0..gh {
        for gx in 0..gw {
            let hit = (0..patch * patch).any(|i| {
                let (x, y) = (gx * patch + i % patch, gy * patch + i / patch);
                taxonomy.coarse_of(map.get(x, y)) == Some(region)
            });
            if hit {
                out.push(gy * gw + gx);
            }
        }
    }
    out
}

/// Smoke-run configuration on the tiny backbone: 32 fixtures, batch 8,
/// 50 epochs (200 steps), peak learning rate 1e-3.
pub fn smoke_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::desk(BackboneConfig::tiny(), 50, 8);
    cfg.base_lr = 1e-3 * 256.0 / 8.0;
    cfg.seed = seed;
    cfg
}
