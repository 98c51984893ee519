use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// VGG-style backbone: five conv stages, each closed by a 2×2 max pool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_eps")]
    pub in_epsilon: f64,
}

fn default_kernel() -> usize {
    3
}

fn default_eps() -> f64 {
    1e-5
}

pub const NUM_STAGES: usize = 5;

impl BackboneConfig {
    /// VGG16 widths.
    pub fn full() -> Self {
        Self {
            stage_channels: vec![64, 128, 256, 512, 512],
            convs_per_stage: vec![2, 2, 3, 3, 3],
            kernel_size: 3,
            in_epsilon: 1e-5,
        }
    }

    /// Eighth-width backbone for desk-scale experiments.
    pub fn tiny() -> Self {
        Self {
            stage_channels: vec![8, 16, 32, 64, 64],
            ..Self::full()
        }
    }

    /// Same widths, VGG19 depth.
    pub fn deeper(mut self) -> Self {
        self.convs_per_stage = vec![2, 2, 4, 4, 4];
        self
    }

    /// Resolves `tiny`, `full`, `tiny-deep`, `full-deep`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "full" => Ok(Self::full()),
            "tiny-deep" => Ok(Self::tiny().deeper()),
            "full-deep" => Ok(Self::full().deeper()),
            other => Err(Error::Config(format!("unknown backbone preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != NUM_STAGES || self.convs_per_stage.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "backbone needs exactly {NUM_STAGES} stages (got {} channel entries, {} conv-count entries)",
                self.stage_channels.len(),
                self.convs_per_stage.len()
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage channel counts must be >= 1".into()));
        }
        if self.convs_per_stage.iter().any(|&c| c == 0) {
            return Err(Error::Config("every stage needs at least one conv".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel_size)));
        }
        if !(self.in_epsilon > 0.0) || !self.in_epsilon.is_finite() {
            return Err(Error::Config(format!("in_epsilon must be > 0, got {}", self.in_epsilon)));
        }
        Ok(())
    }

    pub fn tap4_channels(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn tap5_channels(&self) -> usize {
        self.stage_channels[4]
    }
}

/// Head wiring for the six studied architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadVariant {
    /// Quality only, fully-connected regressor on tap 5.
    A,
    /// Quality only, 1×1 conv + GAP on tap 5.
    B,
    /// Both heads on tap 5, no fusion.
    C,
    /// Distortion on tap 4, quality on tap 5, no fusion.
    D,
    /// Both heads on tap 5, two tap-5 quality maps fused.
    E,
    /// Distortion on tap 4, quality maps from taps 4 and 5 fused.
    F,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 6] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::F];

    pub fn has_distortion_head(self) -> bool {
        !matches!(self, Self::A | Self::B)
    }

    pub fn id(self) -> char {
        match self {
            Self::A => 'a',
            Self::B => 'b',
            Self::C => 'c',
            Self::D => 'd',
            Self::E => 'e',
            Self::F => 'f',
        }
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.id())
    }
}

impl FromStr for HeadVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            "e" => Ok(Self::E),
            "f" => Ok(Self::F),
            other => Err(Error::Config(format!("unknown head variant `{other}` (expected a..f)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub variant: HeadVariant,
    /// Number of distortion classes.
    pub num_distortions: usize,
    pub patch_side: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(backbone: BackboneConfig, variant: HeadVariant, num_distortions: usize, patch_side: usize, seed: u64) -> Self {
        Self {
            backbone,
            variant,
            num_distortions,
            patch_side,
            seed,
        }
    }

    pub fn tiny(variant: HeadVariant, num_distortions: usize, patch_side: usize, seed: u64) -> Self {
        Self::new(BackboneConfig::tiny(), variant, num_distortions, patch_side, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.patch_side == 0 || self.patch_side % 32 != 0 {
            return Err(Error::Config(format!(
                "patch_side must be a positive multiple of 32, got {}",
                self.patch_side
            )));
        }
        if self.variant.has_distortion_head() && self.num_distortions < 1 {
            return Err(Error::Config(format!(
                "variant {} needs at least one distortion class",
                self.variant
            )));
        }
        Ok(())
    }
}
