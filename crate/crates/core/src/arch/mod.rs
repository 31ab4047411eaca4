//! Network definition: RRCAB blocks, the three-level feature interaction
//! module, and the full MSFIN / MSFIN-S models.

mod layers;
mod network;
mod report;
mod rrcab;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::TensorError;

pub use layers::{conv_param_count, Adapter, ConvLayer, DownBlock, Lff, UpBlock};
pub use network::{Level1Output, Level2Output, Level3Output, Msfin, Trace};
pub use report::{count_parameters, ParameterReport};
pub use rrcab::{channel_attention, rrcab_forward, ChannelAttention, Rrcab};

/// Channel-attention bottleneck never narrower than this.
pub const CA_MIN_WIDTH: usize = 4;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("spatial size {h}x{w} must be divisible by {divisor}")]
    SpatialSize { h: usize, w: usize, divisor: usize },
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{name}` has shape {found}, expected {expected}")]
    ParameterShape {
        name: String,
        expected: crate::tensor::Shape,
        found: crate::tensor::Shape,
    },
}

pub type Result<T, E = ArchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Msfin,
    MsfinS,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Msfin => "msfin",
            Variant::MsfinS => "msfin-s",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "msfin" => Ok(Variant::Msfin),
            "msfin-s" | "msfin_s" | "msfins" => Ok(Variant::MsfinS),
            other => Err(format!("unknown variant `{other}` (expected msfin or msfin-s)")),
        }
    }
}

/// Architecture hyperparameters and ablation toggles.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub variant: Variant,
    /// Feature width C.
    pub channels: usize,
    /// Group count of the RRCAB grouped convolutions.
    pub groups: usize,
    pub ca_reduction: usize,
    /// Extra passes through each RRCAB body with shared weights.
    pub rrcab_loops: usize,
    /// Super-resolution factor of the surrounding pipeline.
    pub scale: usize,
    /// Interactive connections between levels.
    pub ic: bool,
    /// Additional level-3 to level-1 connections.
    pub cic: bool,
    /// Connections own their adapter parameters instead of sharing them.
    pub ns: bool,
    /// Channel attention inside each RRCAB.
    pub ca: bool,
    /// Channel shuffle after each grouped convolution.
    pub cs: bool,
    /// 1x1 fusion convolution after the grouped convolutions.
    pub ff: bool,
    /// Add the (pre-upsampled) input to the reconstruction.
    pub global_skip: bool,
    pub leaky_slope: f64,
}

impl NetworkConfig {
    /// Full model. Width 42 with unshared adapters lands on 682.2K
    /// parameters.
    pub fn msfin() -> Self {
        Self {
            variant: Variant::Msfin,
            channels: 42,
            groups: 6,
            ca_reduction: 16,
            rrcab_loops: 1,
            scale: 4,
            ic: true,
            cic: false,
            ns: true,
            ca: true,
            cs: false,
            ff: true,
            global_skip: true,
            leaky_slope: 0.2,
        }
    }

    /// Small model: no recurrence, narrower features.
    pub fn msfin_s() -> Self {
        Self {
            variant: Variant::MsfinS,
            channels: 30,
            rrcab_loops: 0,
            ..Self::msfin()
        }
    }

    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::Msfin => Self::msfin(),
            Variant::MsfinS => Self::msfin_s(),
        }
    }

    /// Small configuration for tests and smoke runs.
    pub fn tiny(channels: usize, groups: usize) -> Self {
        Self {
            channels,
            groups,
            ..Self::msfin()
        }
    }

    pub fn ca_width(&self) -> usize {
        (self.channels / self.ca_reduction.max(1)).max(CA_MIN_WIDTH)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ArchError::Config(m));
        if self.channels == 0 || self.groups == 0 {
            return fail("channels and groups must be positive".into());
        }
        if self.channels % self.groups != 0 {
            return fail(format!(
                "channels {} not divisible by groups {}",
                self.channels, self.groups
            ));
        }
        if self.ca_reduction == 0 {
            return fail("ca_reduction must be positive".into());
        }
        if self.scale == 0 {
            return fail("scale must be positive".into());
        }
        if self.cic && !self.ic {
            return fail("cic requires ic".into());
        }
        if !self.leaky_slope.is_finite() {
            return fail("leaky_slope must be finite".into());
        }
        Ok(())
    }
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self::msfin()
    }
}
