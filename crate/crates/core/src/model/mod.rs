//! The three prediction networks, their parameters, and checkpoint files.

mod checkpoint;
mod networks;
mod params;

use std::fmt;
use std::str::FromStr;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
};
pub use networks::{
    apply_transform, identity_transform, men_forward, ofpn_forward, predict_next, rollout,
    stpn_forward, FlowSource, Forward, Prediction, RolloutStep,
};
pub use params::{init_params, ModelParams, ModelVars};

use crate::error::{bail, Error, Result};

/// What a frame holds: RGB intensities or per-class one-hot maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameMode {
    Rgb,
    Semantic { num_classes: usize },
}

impl FrameMode {
    pub fn channels(&self) -> usize {
        match self {
            FrameMode::Rgb => 3,
            FrameMode::Semantic { num_classes } => *num_classes,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FrameMode::Rgb => "rgb",
            FrameMode::Semantic { .. } => "semantic",
        }
    }
}

/// Positive rational multiplier applied to every hidden channel count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelScale {
    pub num: u32,
    pub den: u32,
}

impl ChannelScale {
    pub const FULL: ChannelScale = ChannelScale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            bail!(
                Config,
                "channel scale must be a positive fraction, got {num}/{den}"
            );
        }
        Ok(Self { num, den })
    }

    /// Scaled channel count, rounded up, never below one.
    pub fn apply(&self, channels: usize) -> usize {
        (channels * self.num as usize)
            .div_ceil(self.den as usize)
            .max(1)
    }
}

impl fmt::Display for ChannelScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for ChannelScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| {
            p.trim()
                .parse::<u32>()
                .map_err(|_| Error::Config(format!("bad channel scale {s:?}")))
        };
        match s.split_once('/') {
            Some((n, d)) => ChannelScale::new(parse(n)?, parse(d)?),
            None => ChannelScale::new(parse(s)?, 1),
        }
    }
}

/// Hidden widths of each network at full scale.
pub const OFPN_CHANNELS: [usize; 3] = [32, 64, 128];
pub const MEN_CHANNELS: [usize; 3] = [64, 64, 64];
pub const STPN_CHANNELS: [usize; 4] = [128, 96, 64, 32];
pub const KERNEL: usize = 3;

/// Static description of a model instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub width: usize,
    pub height: usize,
    /// Number of input frames `N`.
    pub input_len: usize,
    pub mode: FrameMode,
    pub channel_scale: ChannelScale,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_len < 2 {
            bail!(
                Config,
                "at least two input frames are required, got {}",
                self.input_len
            );
        }
        if self.width == 0 || self.height == 0 {
            bail!(Config, "frame size must be positive");
        }
        if let FrameMode::Semantic { num_classes } = self.mode {
            if num_classes < 2 {
                bail!(Config, "semantic mode needs at least two classes");
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.mode.channels()
    }

    pub fn ofpn_channels(&self) -> [usize; 3] {
        OFPN_CHANNELS.map(|c| self.channel_scale.apply(c))
    }

    pub fn men_channels(&self) -> [usize; 3] {
        MEN_CHANNELS.map(|c| self.channel_scale.apply(c))
    }

    pub fn stpn_channels(&self) -> [usize; 4] {
        STPN_CHANNELS.map(|c| self.channel_scale.apply(c))
    }
}
