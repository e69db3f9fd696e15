use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facedata::CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder: StackConfig,
    pub pixel_decoder: StackConfig,
    /// Blocks in each rep decoder; width equals the encoder width.
    pub rep_decoder_depth: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub predictor_hidden: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_true")]
    pub use_class_token: bool,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_true() -> bool {
    true
}

fn default_precision() -> Precision {
    Precision::F32
}

impl BackboneConfig {
    /// Desk-scale model: 64px faces, 8px patches (N = 64).
    pub fn desk() -> Self {
        BackboneConfig {
            image_size: 64,
            patch_size: 8,
            encoder: StackConfig {
                depth: 4,
                width: 192,
                heads: 3,
            },
            pixel_decoder: StackConfig {
                depth: 2,
                width: 96,
                heads: 3,
            },
            rep_decoder_depth: 2,
            projector_hidden: 384,
            projector_out: 128,
            predictor_hidden: 384,
            mlp_ratio: 4,
            use_class_token: true,
            precision: Precision::F32,
        }
    }

    /// Small model for fast smoke runs on the synthetic fixture.
    pub fn tiny() -> Self {
        BackboneConfig {
            image_size: 64,
            patch_size: 8,
            encoder: StackConfig {
                depth: 2,
                width: 64,
                heads: 2,
            },
            pixel_decoder: StackConfig {
                depth: 1,
                width: 32,
                heads: 2,
            },
            rep_decoder_depth: 1,
            projector_hidden: 128,
            projector_out: 32,
            predictor_hidden: 128,
            mlp_ratio: 4,
            use_class_token: true,
            precision: Precision::F32,
        }
    }

    /// ViT-B/16 at 224px with a 512-wide, 8-block pixel decoder.
    pub fn vit_base() -> Self {
        BackboneConfig {
            image_size: 224,
            patch_size: 16,
            encoder: StackConfig {
                depth: 12,
                width: 768,
                heads: 12,
            },
            pixel_decoder: StackConfig {
                depth: 8,
                width: 512,
                heads: 16,
            },
            rep_decoder_depth: 2,
            projector_hidden: 4096,
            projector_out: 256,
            predictor_hidden: 4096,
            mlp_ratio: 4,
            use_class_token: true,
            precision: Precision::F32,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        for (name, s) in [("encoder", self.encoder), ("pixel_decoder", self.pixel_decoder)] {
            if s.width == 0 || s.heads == 0 || s.depth == 0 {
                return bad(format!("{name} depth, width and heads must be positive"));
            }
            if s.width % s.heads != 0 {
                return bad(format!("{name} width {} is not divisible by {} heads", s.width, s.heads));
            }
            if s.width % 4 != 0 {
                return bad(format!("{name} width {} must be divisible by 4 for 2-D positions", s.width));
            }
        }
        if self.projector_hidden == 0 || self.projector_out == 0 || self.predictor_hidden == 0 || self.mlp_ratio == 0 {
            return bad("head dimensions and mlp ratio must be positive".into());
        }
        Ok(())
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::desk()
    }
}
