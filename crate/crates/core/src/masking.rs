//! Facial masking strategies.
//!
//! All strategies mask exactly `round_half_up(N * r)` patches. The covering
//! strategies (CRFR-P, CRFR-R) first mask every patch touching one randomly
//! chosen coverable region `fr` and report those patches in `M_fr`.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::facedata::{PatchRegionTable, Region};
use crate::rng::{self, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    FaskingI,
    Frp,
    CrfrR,
    CrfrP,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Random,
        Strategy::FaskingI,
        Strategy::Frp,
        Strategy::CrfrR,
        Strategy::CrfrP,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::FaskingI => "fasking_i",
            Strategy::Frp => "frp",
            Strategy::CrfrR => "crfr_r",
            Strategy::CrfrP => "crfr_p",
        }
    }

    pub fn covers_region(self) -> bool {
        matches!(self, Strategy::CrfrR | Strategy::CrfrP)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown masking strategy `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub strategy: Strategy,
    pub ratio: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MaskConfig {
    pub fn new(strategy: Strategy, ratio: f64, seed: u64) -> Self {
        MaskConfig { strategy, ratio, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Mask(format!("masking ratio {} must lie in (0, 1)", self.ratio)));
        }
        Ok(())
    }

    /// Same strategy and ratio, seeded for one sample in one epoch.
    pub fn for_sample(&self, sample_id: &str, epoch: u64) -> MaskConfig {
        MaskConfig {
            seed: rng::derive_seed("mask", &[self.seed, rng::sample_key(sample_id), epoch]),
            ..*self
        }
    }

    fn stream(&self) -> StreamRng {
        rng::stream("mask", &[self.seed])
    }
}

/// `round(n * ratio)` with halves rounded up.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio + 0.5).floor() as usize
}

/// Binary per-patch mask, serialized as an array of 0/1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask(Vec<bool>);

impl BinaryMask {
    pub fn zeros(n: usize) -> Self {
        BinaryMask(vec![false; n])
    }

    pub fn from_indices(n: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = BinaryMask::zeros(n);
        for i in indices {
            m.0[i] = true;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|b| **b).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.0[i] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    /// True when every patch set in `other` is also set here.
    pub fn contains_all(&self, other: &BinaryMask) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| *a || !*b)
    }
}

impl Serialize for BinaryMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter().map(|&b| u8::from(b)))
    }
}

impl<'de> Deserialize<'de> for BinaryMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        raw.into_iter()
            .map(|v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(serde::de::Error::custom(format!("mask entry {other} is not binary"))),
            })
            .collect::<std::result::Result<Vec<bool>, _>>()
            .map(BinaryMask)
    }
}

/// Image mask `M` (1 = masked) and facial-region mask `M_fr`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPair {
    #[serde(rename = "M")]
    pub mask: BinaryMask,
    #[serde(rename = "M_fr")]
    pub region_mask: BinaryMask,
    #[serde(rename = "fr")]
    pub covered: Option<Region>,
    /// The covered region alone exceeded the budget; `M == M_fr`.
    #[serde(default)]
    pub extreme: bool,
}

impl MaskPair {
    /// Nothing masked; every patch visible.
    pub fn unmasked(n: usize) -> Self {
        MaskPair {
            mask: BinaryMask::zeros(n),
            region_mask: BinaryMask::zeros(n),
            covered: None,
            extreme: false,
        }
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn masked(&self) -> usize {
        self.mask.count()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.mask.get(i)).collect()
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        self.mask.indices().collect()
    }
}

/// Dispatches on `cfg.strategy`.
pub fn sample_mask(table: &PatchRegionTable, cfg: &MaskConfig) -> Result<MaskPair> {
    let mut rng = cfg.stream();
    sample_mask_with(table, cfg.strategy, cfg.ratio, &mut rng)
}

/// Draws a mask from an explicit random stream.
pub fn sample_mask_with<R: Rng + ?Sized>(
    table: &PatchRegionTable,
    strategy: Strategy,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskPair> {
    MaskConfig::new(strategy, ratio, 0).validate()?;
    let target = mask_budget(table.len(), ratio)?;
    let pair = match strategy {
        Strategy::Random => random(table, target, rng),
        Strategy::FaskingI => fasking_i(table, target, rng),
        Strategy::Frp => frp(table, target, ratio, rng),
        Strategy::CrfrR => crfr_r(table, target, rng)?,
        Strategy::CrfrP => crfr_p(table, target, rng)?,
    };
    debug_assert_eq!(pair.masked(), target);
    Ok(pair)
}

pub fn sample_crfr_p(table: &PatchRegionTable, cfg: &MaskConfig) -> Result<MaskPair> {
    sample_mask(table, &MaskConfig { strategy: Strategy::CrfrP, ..*cfg })
}

pub fn sample_crfr_r(table: &PatchRegionTable, cfg: &MaskConfig) -> Result<MaskPair> {
    sample_mask(table, &MaskConfig { strategy: Strategy::CrfrR, ..*cfg })
}

pub fn sample_frp(table: &PatchRegionTable, cfg: &MaskConfig) -> Result<MaskPair> {
    sample_mask(table, &MaskConfig { strategy: Strategy::Frp, ..*cfg })
}

pub fn sample_fasking_i(table: &PatchRegionTable, cfg: &MaskConfig) -> Result<MaskPair> {
    sample_mask(table, &MaskConfig { strategy: Strategy::FaskingI, ..*cfg })
}

pub fn sample_random(table: &PatchRegionTable, cfg: &MaskConfig) -> Result<MaskPair> {
    sample_mask(table, &MaskConfig { strategy: Strategy::Random, ..*cfg })
}

fn mask_budget(n: usize, ratio: f64) -> Result<usize> {
    let target = masked_count(n, ratio);
    if target == 0 {
        return Err(Error::Mask(format!("ratio {ratio} masks no patch out of {n}")));
    }
    if target >= n {
        return Err(Error::Mask(format!("ratio {ratio} leaves no visible patch out of {n}")));
    }
    Ok(target)
}

fn choose<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], k: usize) -> Vec<usize> {
    index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

fn random<R: Rng + ?Sized>(table: &PatchRegionTable, target: usize, rng: &mut R) -> MaskPair {
    let n = table.len();
    let all: Vec<usize> = (0..n).collect();
    MaskPair {
        mask: BinaryMask::from_indices(n, choose(rng, &all, target)),
        ..MaskPair::unmasked(n)
    }
}

fn fasking_i<R: Rng + ?Sized>(table: &PatchRegionTable, target: usize, rng: &mut R) -> MaskPair {
    let n = table.len();
    let (priority, rest): (Vec<usize>, Vec<usize>) =
        (0..n).partition(|&i| !matches!(table.primary_region(i), Region::Skin | Region::Background));
    let first = target.min(priority.len());
    let mut chosen = choose(rng, &priority, first);
    chosen.extend(choose(rng, &rest, target - first));
    MaskPair {
        mask: BinaryMask::from_indices(n, chosen),
        ..MaskPair::unmasked(n)
    }
}

struct Cover {
    region: Region,
    patches: Vec<usize>,
}

fn cover<R: Rng + ?Sized>(table: &PatchRegionTable, rng: &mut R) -> Result<Cover> {
    let present = table.coverable_present();
    let region = *present
        .choose(rng)
        .ok_or_else(|| Error::Mask("no coverable facial region present".into()))?;
    Ok(Cover {
        region,
        patches: table.patches_touching(region),
    })
}

/// Extreme case: keep a random `target` subset of the covered patches and use
/// it as both masks.
fn extreme_case<R: Rng + ?Sized>(n: usize, cover: Cover, target: usize, rng: &mut R) -> MaskPair {
    let kept = BinaryMask::from_indices(n, choose(rng, &cover.patches, target));
    MaskPair {
        mask: kept.clone(),
        region_mask: kept,
        covered: Some(cover.region),
        extreme: true,
    }
}

fn crfr_r<R: Rng + ?Sized>(table: &PatchRegionTable, target: usize, rng: &mut R) -> Result<MaskPair> {
    let n = table.len();
    let cover = cover(table, rng)?;
    if cover.patches.len() > target {
        return Ok(extreme_case(n, cover, target, rng));
    }
    let region_mask = BinaryMask::from_indices(n, cover.patches.iter().copied());
    let others: Vec<usize> = (0..n).filter(|&i| !region_mask.get(i)).collect();
    let mut mask = region_mask.clone();
    for i in choose(rng, &others, target - cover.patches.len()) {
        mask.set(i, true);
    }
    Ok(MaskPair {
        mask,
        region_mask,
        covered: Some(cover.region),
        extreme: false,
    })
}

fn crfr_p<R: Rng + ?Sized>(table: &PatchRegionTable, target: usize, rng: &mut R) -> Result<MaskPair> {
    let n = table.len();
    let cover = cover(table, rng)?;
    if cover.patches.len() > target {
        return Ok(extreme_case(n, cover, target, rng));
    }
    let region_mask = BinaryMask::from_indices(n, cover.patches.iter().copied());
    let mut fill = ProportionalFill::new(table, &region_mask);
    // residual ratio against the fixed budget, recomputed before every region
    for slot in 0..fill.pools.len() {
        let masked = fill.masked_total();
        let residual = if masked >= n {
            0.0
        } else {
            (target - masked) as f64 / (n - masked) as f64
        };
        fill.mask_in(slot, masked_count(fill.pools[slot].patches.len(), residual), rng);
    }
    fill.adjust(target, rng);
    Ok(MaskPair {
        mask: fill.into_mask(),
        region_mask,
        covered: Some(cover.region),
        extreme: false,
    })
}

fn frp<R: Rng + ?Sized>(table: &PatchRegionTable, target: usize, ratio: f64, rng: &mut R) -> MaskPair {
    let n = table.len();
    let none = BinaryMask::zeros(n);
    let mut fill = ProportionalFill::new(table, &none);
    for slot in 0..fill.pools.len() {
        fill.mask_in(slot, masked_count(fill.pools[slot].patches.len(), ratio), rng);
    }
    fill.adjust(target, rng);
    MaskPair {
        mask: fill.into_mask(),
        ..MaskPair::unmasked(n)
    }
}

/// Largest number of patches a region pool may have masked while keeping one
/// visible patch.
fn visibility_cap(pool_len: usize) -> usize {
    if pool_len >= 2 {
        pool_len - 1
    } else {
        pool_len
    }
}

struct RegionPool {
    region: Region,
    /// Patches owned by the region and not already covered.
    patches: Vec<usize>,
    masked: Vec<bool>,
}

impl RegionPool {
    fn masked_count(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }

    fn positions(&self, state: bool) -> Vec<usize> {
        (0..self.patches.len()).filter(|&j| self.masked[j] == state).collect()
    }
}

/// Per-region masking over the primary-region partition of the patches not in
/// `base`.
struct ProportionalFill {
    base: BinaryMask,
    pools: Vec<RegionPool>,
}

impl ProportionalFill {
    fn new(table: &PatchRegionTable, base: &BinaryMask) -> Self {
        let pools = Region::ALL
            .into_iter()
            .map(|region| RegionPool {
                region,
                patches: table
                    .patches_owned_by(region)
                    .into_iter()
                    .filter(|&i| !base.get(i))
                    .collect(),
                masked: Vec::new(),
            })
            .filter(|p| !p.patches.is_empty())
            .map(|mut p| {
                p.masked = vec![false; p.patches.len()];
                p
            })
            .collect();
        ProportionalFill {
            base: base.clone(),
            pools,
        }
    }

    fn masked_total(&self) -> usize {
        self.base.count() + self.pools.iter().map(RegionPool::masked_count).sum::<usize>()
    }

    /// Masks `k` random patches of one pool, clamped to its visibility cap.
    fn mask_in<R: Rng + ?Sized>(&mut self, slot: usize, k: usize, rng: &mut R) {
        let pool = &mut self.pools[slot];
        let k = k.min(visibility_cap(pool.patches.len()));
        for j in index::sample(rng, pool.patches.len(), k) {
            pool.masked[j] = true;
        }
    }

    /// Pool visiting order for the final adjustment: largest pool first, ties
    /// preferring skin, then background, then taxonomy order.
    fn adjustment_order(&self) -> Vec<usize> {
        let preference = |r: Region| match r {
            Region::Skin => 0,
            Region::Background => 1,
            other => 2 + other.index(),
        };
        let mut order: Vec<usize> = (0..self.pools.len()).collect();
        order.sort_by_key(|&s| (std::cmp::Reverse(self.pools[s].patches.len()), preference(self.pools[s].region)));
        order
    }

    /// Adds or removes masked patches until exactly `target` are masked.
    fn adjust<R: Rng + ?Sized>(&mut self, target: usize, rng: &mut R) {
        let order = self.adjustment_order();
        let current = self.masked_total();
        if current < target {
            let mut deficit = target - current;
            // first pass honours visibility caps; the second only runs when the
            // budget cannot be met otherwise
            for respect_cap in [true, false] {
                for &slot in &order {
                    if deficit == 0 {
                        return;
                    }
                    let pool = &mut self.pools[slot];
                    let limit = if respect_cap {
                        visibility_cap(pool.patches.len())
                    } else {
                        pool.patches.len()
                    };
                    let room = limit.saturating_sub(pool.masked_count()).min(deficit);
                    let free = pool.positions(false);
                    for j in choose(rng, &free, room) {
                        pool.masked[j] = true;
                    }
                    deficit -= room;
                }
            }
        } else if current > target {
            let mut surplus = current - target;
            for &slot in &order {
                if surplus == 0 {
                    return;
                }
                let pool = &mut self.pools[slot];
                let taken = pool.positions(true);
                let k = taken.len().min(surplus);
                for j in choose(rng, &taken, k) {
                    pool.masked[j] = false;
                }
                surplus -= k;
            }
        }
    }

    fn into_mask(self) -> BinaryMask {
        let mut mask = self.base;
        for pool in &self.pools {
            for (j, &i) in pool.patches.iter().enumerate() {
                if pool.masked[j] {
                    mask.set(i, true);
                }
            }
        }
        mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Region::*;

    fn grid(regions: &[Region]) -> PatchRegionTable {
        let side = (regions.len() as f64).sqrt() as usize;
        PatchRegionTable::from_primary(side, side, regions).unwrap()
    }

    fn count_masked(pair: &MaskPair, table: &PatchRegionTable, region: Region) -> usize {
        pair.mask
            .indices()
            .filter(|&i| table.primary_region(i) == region)
            .count()
    }

    /// 4x4 toy face: 2 eye patches, 4 hair, 6 skin, 4 background.
    fn toy_face() -> PatchRegionTable {
        grid(&[
            Hair, Hair, Hair, Hair, //
            Background, Eyes, Eyes, Background, //
            Skin, Skin, Skin, Skin, //
            Background, Skin, Skin, Background,
        ])
    }

    #[test]
    fn masked_count_rounds_half_up() {
        assert_eq!(masked_count(196, 0.75), 147);
        assert_eq!(masked_count(16, 0.5), 8);
        assert_eq!(masked_count(10, 0.25), 3);
        assert_eq!(masked_count(10, 0.05), 1);
    }

    #[test]
    fn crfr_p_on_toy_face_matches_hand_enumeration() {
        // Budget 8. Covering eyes (N_fr = 2):
        //   hair: (8-2)/(16-2) = 0.4286, round(4 * 0.4286) = 2 -> masked 4
        //   skin: (8-4)/(16-4) = 0.3333, round(6 * 0.3333) = 2 -> masked 6
        //   background: (8-6)/(16-6) = 0.2, round(4 * 0.2) = 1 -> masked 7
        //   adjustment: +1 in the largest pool (skin) -> skin 3
        // Covering hair (N_fr = 4):
        //   eyes: (8-4)/(16-4) = 0.3333, round(2 * 0.3333) = 1 -> masked 5
        //   skin: (8-5)/(16-5) = 0.2727, round(6 * 0.2727) = 2 -> masked 7
        //   background: (8-7)/(16-7) = 0.1111, round(4 * 0.1111) = 0 -> masked 7
        //   adjustment: +1 in skin -> skin 3
        let table = toy_face();
        let mut seen = Vec::new();
        for seed in 0..50 {
            let pair = sample_crfr_p(&table, &MaskConfig::new(Strategy::CrfrP, 0.5, seed)).unwrap();
            assert!(pair.mask.contains_all(&pair.region_mask));
            assert_eq!(pair.masked(), 8);
            assert!(!pair.extreme);
            assert_eq!(count_masked(&pair, &table, Skin), 3);
            match pair.covered {
                Some(Eyes) => {
                    assert_eq!(pair.region_mask.indices().collect::<Vec<_>>(), vec![5, 6]);
                    assert_eq!(count_masked(&pair, &table, Hair), 2);
                    assert_eq!(count_masked(&pair, &table, Background), 1);
                }
                Some(Hair) => {
                    assert_eq!(pair.region_mask.indices().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
                    assert_eq!(count_masked(&pair, &table, Eyes), 1);
                    assert_eq!(count_masked(&pair, &table, Background), 0);
                }
                other => panic!("unexpected covered region {other:?}"),
            }
            seen.push(pair.covered);
        }
        assert!(seen.contains(&Some(Eyes)) && seen.contains(&Some(Hair)));
    }

    #[test]
    fn crfr_p_extreme_case() {
        let mut regions = vec![Hair; 16];
        regions[0] = Skin;
        regions[15] = Background;
        let table = grid(&regions);
        let pair = sample_crfr_p(&table, &MaskConfig::new(Strategy::CrfrP, 0.5, 3)).unwrap();
        assert!(pair.extreme);
        assert_eq!(pair.covered, Some(Hair));
        assert_eq!(pair.masked(), 8);
        assert_eq!(pair.mask, pair.region_mask);
        assert!(!pair.mask.get(0) && !pair.mask.get(15));
    }

    #[test]
    fn budget_on_face_sized_grid() {
        let mut regions = vec![Skin; 196];
        for r in regions.iter_mut().take(30) {
            *r = Hair;
        }
        regions[100] = Nose;
        regions[101] = Nose;
        let table = grid(&regions);
        for strategy in Strategy::ALL {
            let pair = sample_mask(&table, &MaskConfig::new(strategy, 0.75, 11)).unwrap();
            assert_eq!(pair.masked(), 147, "{strategy}");
        }
    }

    #[test]
    fn frp_is_proportional() {
        let table = grid(&[Skin; 16]);
        let pair = sample_frp(&table, &MaskConfig::new(Strategy::Frp, 0.5, 1)).unwrap();
        assert_eq!(pair.masked(), 8);
        assert_eq!(pair.region_mask.count(), 0);
        assert_eq!(pair.covered, None);

        let mut regions = vec![Skin; 8];
        regions.extend([Background; 8]);
        let table = grid(&regions);
        let pair = sample_frp(&table, &MaskConfig::new(Strategy::Frp, 0.5, 2)).unwrap();
        assert_eq!(count_masked(&pair, &table, Skin), 4);
        assert_eq!(count_masked(&pair, &table, Background), 4);
    }

    #[test]
    fn crfr_r_adds_random_patches() {
        let table = toy_face();
        let pair = sample_crfr_r(&table, &MaskConfig::new(Strategy::CrfrR, 0.5, 9)).unwrap();
        assert_eq!(pair.region_mask.count(), 2);
        assert_eq!(pair.masked() - pair.region_mask.count(), 6);
        assert!(pair.mask.contains_all(&pair.region_mask));
    }

    #[test]
    fn fasking_i_priority_tier() {
        let mut regions = vec![Skin; 196];
        for r in regions.iter_mut().take(40) {
            *r = Hair;
        }
        let table = grid(&regions);
        let pair = sample_fasking_i(&table, &MaskConfig::new(Strategy::FaskingI, 0.75, 5)).unwrap();
        assert_eq!(count_masked(&pair, &table, Hair), 40);
        assert_eq!(count_masked(&pair, &table, Skin), 107);

        let mut regions = vec![Background; 196];
        for r in regions.iter_mut().take(160) {
            *r = Mouth;
        }
        let table = grid(&regions);
        let pair = sample_fasking_i(&table, &MaskConfig::new(Strategy::FaskingI, 0.75, 5)).unwrap();
        assert_eq!(count_masked(&pair, &table, Mouth), 147);
    }

    #[test]
    fn random_leaves_one_visible() {
        let table = grid(&[Skin; 196]);
        let pair = sample_random(&table, &MaskConfig::new(Strategy::Random, 195.0 / 196.0, 0)).unwrap();
        assert_eq!(pair.visible_indices().len(), 1);
    }

    #[test]
    fn errors() {
        let table = grid(&[Skin; 16]);
        assert!(matches!(
            sample_crfr_p(&table, &MaskConfig::new(Strategy::CrfrP, 0.5, 0)),
            Err(Error::Mask(_))
        ));
        assert!(sample_random(&table, &MaskConfig::new(Strategy::Random, 0.01, 0)).is_err());
        assert!(sample_random(&table, &MaskConfig::new(Strategy::Random, 1.0, 0)).is_err());
        assert!(sample_random(&table, &MaskConfig::new(Strategy::Random, 0.0, 0)).is_err());
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let table = toy_face();
        let cfg = MaskConfig::new(Strategy::CrfrP, 0.5, 42);
        assert_eq!(sample_mask(&table, &cfg).unwrap(), sample_mask(&table, &cfg).unwrap());
        let a = cfg.for_sample("face_0", 0);
        let b = cfg.for_sample("face_0", 1);
        assert_ne!(a.seed, b.seed);
    }

    #[test]
    fn mask_pair_json_shape() {
        let table = toy_face();
        let pair = sample_crfr_p(&table, &MaskConfig::new(Strategy::CrfrP, 0.5, 1)).unwrap();
        let json = serde_json::to_value(&pair).unwrap();
        assert_eq!(json["fr"], pair.covered.unwrap().name());
        assert_eq!(json["M"].as_array().unwrap().len(), 16);
        let back: MaskPair = serde_json::from_value(json).unwrap();
        assert_eq!(back, pair);
    }
}
