use serde::{Deserialize, Serialize};

use crate::alphabet::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::labelgen::{default_levels, LevelSpec};

/// Architecture hyper-parameters. Serialized into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Output channels of the stem (stride 2) and of the stride-4, -8 and
    /// -16 backbone stages.
    pub backbone_channels: [usize; 4],
    /// Residual blocks per backbone stage.
    pub blocks_per_stage: usize,
    /// Channel count `C` of the pyramid levels and of every head.
    pub pyramid_channels: usize,
    /// Sampled points per anchor (`K`).
    pub num_points: usize,
    /// Mask coefficients / prototypes (`k`).
    pub num_coefficients: usize,
    pub num_classes: usize,
    pub levels: Vec<LevelSpec>,
    /// Square training crop, in pixels.
    pub image_size: usize,
    /// Geometry distances are predicted in units of the level stride.
    pub geometry_in_stride_units: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: [16, 32, 64, 128],
            blocks_per_stage: 1,
            pyramid_channels: 64,
            num_points: 25,
            num_coefficients: 4,
            num_classes: NUM_CLASSES,
            levels: default_levels(),
            image_size: 320,
            geometry_in_stride_units: true,
        }
    }
}

impl ModelConfig {
    /// Stride of the coarsest backbone stage; inputs are padded to it.
    pub const MAX_STRIDE: usize = 16;

    /// A very small configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        Self {
            backbone_channels: [4, 8, 8, 8],
            blocks_per_stage: 1,
            pyramid_channels: 8,
            num_points: 5,
            num_coefficients: 4,
            image_size: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.num_points == 0 || self.num_coefficients == 0 || self.pyramid_channels == 0 {
            return Err(Error::Config("K, k and C must be positive".into()));
        }
        if self.backbone_channels.contains(&0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        let strides: Vec<usize> = self.levels.iter().map(|l| l.stride).collect();
        if strides != [4, 8] {
            return Err(Error::Config(format!(
                "levels must have strides [4, 8], got {strides:?}"
            )));
        }
        if !self.image_size.is_multiple_of(Self::MAX_STRIDE) {
            return Err(Error::Config(format!(
                "image_size {} is not a multiple of {}",
                self.image_size,
                Self::MAX_STRIDE
            )));
        }
        Ok(())
    }
}
