use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Fine label ids written by the face parser. Ids 0..=10 follow the LaPa/FaRL
/// layout; the two boundary labels are produced by the fixture generator.
pub mod fine {
    pub const BACKGROUND: u8 = 0;
    pub const SKIN: u8 = 1;
    pub const RIGHT_EYEBROW: u8 = 2;
    pub const LEFT_EYEBROW: u8 = 3;
    pub const RIGHT_EYE: u8 = 4;
    pub const LEFT_EYE: u8 = 5;
    pub const NOSE: u8 = 6;
    pub const UPPER_LIP: u8 = 7;
    pub const INNER_MOUTH: u8 = 8;
    pub const LOWER_LIP: u8 = 9;
    pub const HAIR: u8 = 10;
    pub const SKIN_BACKGROUND: u8 = 11;
    pub const SKIN_HAIR: u8 = 12;

    pub const COUNT: usize = 13;
}

/// Coarse facial regions. Declaration order is the fixed taxonomy order used for
/// tie-breaking and for region iteration in the masking strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Eyebrows,
    Eyes,
    Mouth,
    Nose,
    FaceBoundary,
    Hair,
    Skin,
    Background,
}

impl Region {
    pub const COUNT: usize = 8;

    pub const ALL: [Region; Region::COUNT] = [
        Region::Eyebrows,
        Region::Eyes,
        Region::Mouth,
        Region::Nose,
        Region::FaceBoundary,
        Region::Hair,
        Region::Skin,
        Region::Background,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Region> {
        Region::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Eyebrows => "eyebrows",
            Region::Eyes => "eyes",
            Region::Mouth => "mouth",
            Region::Nose => "nose",
            Region::FaceBoundary => "face_boundary",
            Region::Hair => "hair",
            Region::Skin => "skin",
            Region::Background => "background",
        }
    }

    /// Regions that may be chosen as the covered region.
    pub fn is_coverable(self) -> bool {
        !matches!(self, Region::Skin | Region::Background)
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Region::ALL
            .iter()
            .copied()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown region `{s}`"))
    }
}

/// Small set of coarse regions, one bit per region.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct RegionSet(u8);

impl RegionSet {
    pub const EMPTY: RegionSet = RegionSet(0);

    pub fn insert(&mut self, region: Region) {
        self.0 |= 1 << region.index();
    }

    pub fn contains(self, region: Region) -> bool {
        self.0 & (1 << region.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Region> {
        Region::ALL.into_iter().filter(move |r| self.contains(*r))
    }
}

impl FromIterator<Region> for RegionSet {
    fn from_iter<I: IntoIterator<Item = Region>>(iter: I) -> Self {
        let mut set = RegionSet::EMPTY;
        for r in iter {
            set.insert(r);
        }
        set
    }
}

/// Mapping from fine parser labels to coarse regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionTaxonomy {
    coarse: [Option<Region>; 256],
}

impl RegionTaxonomy {
    pub fn standard() -> Self {
        let mut coarse = [None; 256];
        coarse[fine::BACKGROUND as usize] = Some(Region::Background);
        coarse[fine::SKIN as usize] = Some(Region::Skin);
        coarse[fine::RIGHT_EYEBROW as usize] = Some(Region::Eyebrows);
        coarse[fine::LEFT_EYEBROW as usize] = Some(Region::Eyebrows);
        coarse[fine::RIGHT_EYE as usize] = Some(Region::Eyes);
        coarse[fine::LEFT_EYE as usize] = Some(Region::Eyes);
        coarse[fine::NOSE as usize] = Some(Region::Nose);
        coarse[fine::UPPER_LIP as usize] = Some(Region::Mouth);
        coarse[fine::INNER_MOUTH as usize] = Some(Region::Mouth);
        coarse[fine::LOWER_LIP as usize] = Some(Region::Mouth);
        coarse[fine::HAIR as usize] = Some(Region::Hair);
        coarse[fine::SKIN_BACKGROUND as usize] = Some(Region::FaceBoundary);
        coarse[fine::SKIN_HAIR as usize] = Some(Region::FaceBoundary);
        RegionTaxonomy { coarse }
    }

    pub fn coarse_of(&self, label: u8) -> Option<Region> {
        self.coarse[label as usize]
    }

    pub fn is_declared(&self, label: u8) -> bool {
        self.coarse[label as usize].is_some()
    }

    pub fn declared_labels(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=255u8).filter(|l| self.is_declared(*l))
    }

    pub fn coverable(&self) -> impl Iterator<Item = Region> {
        Region::ALL.into_iter().filter(|r| r.is_coverable())
    }
}

impl Default for RegionTaxonomy {
    fn default() -> Self {
        RegionTaxonomy::standard()
    }
}
