//! Spatial attention block.
//!
//! `n` input channels are squeezed to `n / r` by a 1×1 convolution, mixed
//! by a 3×3 convolution with dilation `D`, collapsed to one channel by a
//! second 1×1 convolution and squashed by a sigmoid. The result is a
//! `(N, 1, H, W)` weight map strictly inside (0, 1).

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::count::conv_param_count;
use super::net::{Builder, Conv, Parameters};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::ConvGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SaConfig {
    /// Input channel count `n`.
    pub channels: usize,
    /// Reduction factor `r`.
    pub reduction: usize,
    /// Dilation `D` of the 3×3 convolution.
    pub dilation: usize,
}

impl SaConfig {
    pub fn new(channels: usize) -> Self {
        SaConfig {
            channels,
            reduction: 16,
            dilation: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reduction == 0 || self.channels % self.reduction != 0 || self.channels < self.reduction {
            return Err(Error::Config(format!(
                "attention: {} channels not divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        if self.dilation == 0 {
            return Err(Error::Config("attention: dilation must be >= 1".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.channels / self.reduction
    }
}

/// Closed-form parameter count of one attention block.
pub fn sa_param_count(cfg: &SaConfig) -> u64 {
    let (n, h) = (cfg.channels as u64, cfg.hidden() as u64);
    conv_param_count(n, h, 1) + conv_param_count(h, h, 3) + conv_param_count(h, 1, 1)
}

#[derive(Debug, Clone)]
pub(crate) struct SaBlock {
    pub config: SaConfig,
    reduce: Conv,
    dilated: Conv,
    collapse: Conv,
}

impl SaBlock {
    pub(crate) fn build(b: &mut Builder, prefix: &str, config: SaConfig) -> Result<Self> {
        config.validate()?;
        let (n, h) = (config.channels, config.hidden());
        Ok(SaBlock {
            config,
            reduce: b.conv(&format!("{prefix}.reduce"), n, h, 1, ConvGeometry::UNIT),
            dilated: b.conv(&format!("{prefix}.dilated"), h, h, 3, ConvGeometry::same(3, config.dilation)),
            collapse: b.conv(&format!("{prefix}.collapse"), h, 1, 1, ConvGeometry::UNIT),
        })
    }

    pub(crate) fn apply(&self, g: &mut Graph<'_>, params: &[Var], x: Var) -> Result<Var> {
        let c = g.value(x).dims4("sa_forward")?[1];
        if c != self.config.channels {
            return Err(Error::shape(
                "sa_forward",
                format!("expected {} channels, got {c}", self.config.channels),
            ));
        }
        let h = self.reduce.apply(g, params, x)?;
        let h = g.relu(h);
        let h = self.dilated.apply(g, params, h)?;
        let h = g.relu(h);
        let logits = self.collapse.apply(g, params, h)?;
        Ok(g.sigmoid(logits))
    }
}

/// A free-standing attention block with its own parameters.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    block: SaBlock,
    params: Parameters,
}

impl SpatialAttention {
    pub fn new(config: SaConfig, seed: u64) -> Result<Self> {
        let mut b = Builder::new(ChaCha8Rng::seed_from_u64(seed));
        let block = SaBlock::build(&mut b, "sa", config)?;
        Ok(SpatialAttention {
            block,
            params: b.finish(),
        })
    }

    pub fn config(&self) -> SaConfig {
        self.block.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    /// Records the block on `g`. Returns the map and the parameter handles.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, features: Var) -> Result<(Var, Vec<Var>)> {
        let params = self.params.bind(g);
        let map = self.block.apply(g, &params, features)?;
        Ok((map, params))
    }
}
