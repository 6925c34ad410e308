use std::fmt;
use std::str::FromStr;

use crate::bie::ScaleMode;
use crate::error::{arg, Error, Result};
use crate::kv::KeyValues;

/// Network topology.
///
/// * `Mixed`: both polarities in one stream of residual blocks, no BIE.
/// * `Plain`: one stream per polarity with inter-stream BIE.
/// * `Full`: `Plain` plus temporal sub-streams and inner-stream BIE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Mixed,
    Plain,
    Full,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Mixed => "mixed",
            Variant::Plain => "plain",
            Variant::Full => "full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(Variant::Mixed),
            "plain" => Ok(Variant::Plain),
            "full" => Ok(Variant::Full),
            other => Err(arg(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Feature channels `C`.
    pub channels: usize,
    /// Layers of basic blocks `N`.
    pub blocks: usize,
    /// Global structures `M` per BIE.
    pub structures: usize,
    /// Upscaling factor `S`, a power of two.
    pub scale: usize,
    /// Training window length `T` in frames.
    pub window: usize,
    pub variant: Variant,
    /// Carry interaction representations across time steps.
    pub carry_state: bool,
    pub scale_mode: ScaleMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            blocks: 5,
            structures: 128,
            scale: 4,
            window: 9,
            variant: Variant::Full,
            carry_state: true,
            scale_mode: ScaleMode::Eq2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn toy(variant: Variant, channels: usize, blocks: usize, structures: usize, scale: usize, window: usize) -> Self {
        Self {
            channels,
            blocks,
            structures,
            scale,
            window,
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("blocks", self.blocks),
            ("structures", self.structures),
            ("scale", self.scale),
            ("window", self.window),
        ] {
            if v == 0 {
                return Err(arg(format!("{name} must be at least 1")));
            }
        }
        if !self.scale.is_power_of_two() {
            return Err(arg(format!("scale {} is not a power of two", self.scale)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("channels", self.channels);
        kv.set("blocks", self.blocks);
        kv.set("structures", self.structures);
        kv.set("scale", self.scale);
        kv.set("window", self.window);
        kv.set("variant", self.variant);
        kv.set("carry_state", self.carry_state);
        kv.set("scale_mode", self.scale_mode.as_str());
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let cfg = Self {
            channels: kv.require("channels")?,
            blocks: kv.require("blocks")?,
            structures: kv.require("structures")?,
            scale: kv.require("scale")?,
            window: kv.require("window")?,
            variant: kv.require::<String>("variant")?.parse()?,
            carry_state: kv.require("carry_state")?,
            scale_mode: kv.require::<String>("scale_mode")?.parse()?,
            seed: kv.require("seed")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
