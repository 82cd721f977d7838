use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Number of down-sampling blocks in every encoder.
pub const DEPTH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Unet,
    UnetSa,
    EarlyFuse,
    LateFuse,
    FuseOrigin,
    FuseAdd,
    FuseUnet,
    FuseUnetSa,
    Proposed,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Unet,
        Variant::UnetSa,
        Variant::EarlyFuse,
        Variant::LateFuse,
        Variant::FuseOrigin,
        Variant::FuseAdd,
        Variant::FuseUnet,
        Variant::FuseUnetSa,
        Variant::Proposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Unet => "unet",
            Variant::UnetSa => "unet_sa",
            Variant::EarlyFuse => "early_fuse",
            Variant::LateFuse => "late_fuse",
            Variant::FuseOrigin => "fuse_origin",
            Variant::FuseAdd => "fuse_add",
            Variant::FuseUnet => "fuse_unet",
            Variant::FuseUnetSa => "fuse_unet_sa",
            Variant::Proposed => "proposed",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
    }

    /// Whether the forward pass takes an assistant image.
    pub fn uses_assistant(self) -> bool {
        !matches!(self, Variant::Unet | Variant::UnetSa)
    }

    /// Two separate encoder streams.
    pub fn two_stream(self) -> bool {
        !matches!(self, Variant::Unet | Variant::UnetSa | Variant::EarlyFuse)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::UnetSa | Variant::FuseUnetSa | Variant::Proposed)
    }

    /// Encoders at half the U-Net width.
    pub fn half_width(self) -> bool {
        matches!(
            self,
            Variant::LateFuse | Variant::FuseUnet | Variant::FuseUnetSa | Variant::Proposed
        )
    }

    /// Published parameter count in millions, where the study lists one.
    pub fn reference_millions(self) -> Option<f64> {
        match self {
            Variant::Unet | Variant::EarlyFuse => Some(34.5),
            Variant::UnetSa => Some(34.7),
            Variant::LateFuse => Some(25.1),
            Variant::FuseOrigin => Some(56.2),
            Variant::FuseUnet | Variant::Proposed => Some(26.7),
            Variant::FuseUnetSa => Some(26.8),
            Variant::FuseAdd => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant {
                name: s.into(),
                valid: Self::valid_names(),
            })
    }
}

/// Reduction factor and dilation shared by every attention site of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaSettings {
    pub reduction: usize,
    pub dilation: usize,
}

impl Default for SaSettings {
    fn default() -> Self {
        SaSettings {
            reduction: 16,
            dilation: 4,
        }
    }
}

/// Declarative description of one architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Output channels of each encoder block, per stream.
    pub encoder_channels: [usize; DEPTH],
    /// Bottleneck width. For `late_fuse` each stream gets half and the
    /// halves are concatenated.
    pub bottleneck_channels: usize,
    /// Output channels of each decoder level, shallow to deep.
    pub decoder_channels: [usize; DEPTH],
    pub in_channels_per_modality: usize,
    pub sa: Option<SaSettings>,
}

impl ModelSpec {
    /// Full-size channel plan: U-Net widths 32..512 with a 1024 bottleneck.
    pub fn full_size(variant: Variant) -> Self {
        Self::with_base_width(variant, 32)
    }

    /// Channel plan scaled so the first U-Net block has `base` channels.
    ///
    /// Half-width variants get `base / 2` in their first block. The
    /// attention reduction factor is 16, lowered to the largest power of two
    /// dividing the narrowest attention input when the plan is too thin.
    pub fn with_base_width(variant: Variant, base: usize) -> Self {
        let decoder_channels: [usize; DEPTH] = core::array::from_fn(|i| base << i);
        let first = if variant.half_width() { base / 2 } else { base };
        let encoder_channels = core::array::from_fn(|i| first << i);
        let sa = variant.has_attention().then(|| {
            let mut reduction = 16;
            while reduction > 1 && (first == 0 || first % reduction != 0) {
                reduction /= 2;
            }
            SaSettings {
                reduction,
                dilation: 4,
            }
        });
        ModelSpec {
            variant,
            encoder_channels,
            bottleneck_channels: base * 32,
            decoder_channels,
            in_channels_per_modality: 1,
            sa,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("{} spec: {msg}", self.variant)));
        if self.encoder_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.bottleneck_channels == 0 || self.in_channels_per_modality == 0 {
            return bad("bottleneck and input channels must be positive".into());
        }
        if self.variant == Variant::LateFuse && self.bottleneck_channels % 2 != 0 {
            return bad("late_fuse splits the bottleneck across two streams; it must be even".into());
        }
        let factor = if self.variant.half_width() { 2 } else { 1 };
        for (e, d) in self.encoder_channels.iter().zip(&self.decoder_channels) {
            if e * factor != *d {
                return bad(format!(
                    "encoder width {e} must be 1/{factor} of the matching U-Net width {d}"
                ));
            }
        }
        match (self.variant.has_attention(), self.sa) {
            (true, None) => bad("attention settings required".into()),
            (false, Some(_)) => bad("variant has no attention sites".into()),
            (true, Some(sa)) => {
                for &n in &self.encoder_channels {
                    super::SaConfig {
                        channels: n,
                        reduction: sa.reduction,
                        dilation: sa.dilation,
                    }
                    .validate()?;
                }
                Ok(())
            }
            (false, None) => Ok(()),
        }
    }

    /// Stable textual form, used for checkpoint compatibility hashes.
    pub fn canonical(&self) -> String {
        let join = |c: &[usize]| c.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",");
        let sa = match self.sa {
            Some(s) => format!("r{}d{}", s.reduction, s.dilation),
            None => "none".into(),
        };
        format!(
            "variant={};encoder={};bottleneck={};decoder={};in={};sa={}",
            self.variant,
            join(&self.encoder_channels),
            self.bottleneck_channels,
            join(&self.decoder_channels),
            self.in_channels_per_modality,
            sa
        )
    }
}
