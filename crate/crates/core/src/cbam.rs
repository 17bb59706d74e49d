//! Convolutional block attention: channel gates followed by a spatial gate.

use crate::autograd::Var;
use crate::error::{arg_err, dim_err, Result};
use crate::layers::Conv2d;
use crate::ops::PoolKind;
use crate::params::{Graph, ParamBuilder};
use crate::tensor::Scalar;

pub const DEFAULT_RATIO: usize = 16;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

/// Shared two-layer bottleneck MLP (1x1 convolutions, no bias) applied to the
/// globally average- and max-pooled descriptors.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub reduce: Conv2d,
    pub expand: Conv2d,
    pub channels: usize,
    pub ratio: usize,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, ratio: usize) -> Result<Self> {
        if ratio == 0 || channels % ratio != 0 {
            return Err(arg_err!(
                "channel attention: {} channels not divisible by ratio {}",
                channels,
                ratio
            ));
        }
        let hidden = channels / ratio;
        Ok(b.scoped(name, |b| Self {
            reduce: Conv2d::same(b, "reduce", channels, hidden, 1, 1),
            expand: Conv2d::same(b, "expand", hidden, channels, 1, 1),
            channels,
            ratio,
        }))
    }

    pub fn num_params(&self) -> usize {
        self.reduce.num_params() + self.expand.num_params()
    }

    fn mlp<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, x)?;
        let h = g.tape.relu(h);
        self.expand.forward(g, h)
    }

    /// Gates of shape `[N,C,1,1]`, each in `(0,1)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, m: Var) -> Result<Var> {
        let (_, c, _, _) = g.tape.value(m).dims4()?;
        if c != self.channels {
            return Err(dim_err!(
                "channel attention built for {} channels, got {}",
                self.channels,
                c
            ));
        }
        let avg = g.tape.global_pool(m, PoolKind::Avg)?;
        let max = g.tape.global_pool(m, PoolKind::Max)?;
        let a = self.mlp(g, avg)?;
        let b = self.mlp(g, max)?;
        let s = g.tape.add(a, b)?;
        Ok(g.tape.sigmoid(s))
    }
}

/// `S x S` convolution over the stacked channel-mean and channel-max maps.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv2d,
    pub kernel: usize,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(arg_err!("spatial attention kernel must be odd, got {}", kernel));
        }
        Ok(b.scoped(name, |b| Self {
            conv: Conv2d::same(b, "conv", 2, 1, kernel, 1),
            kernel,
        }))
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params()
    }

    /// Gate map of shape `[N,1,H,W]`, each in `(0,1)`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        let mean = g.tape.channel_pool(f, PoolKind::Avg)?;
        let max = g.tape.channel_pool(f, PoolKind::Max)?;
        let stacked = g.tape.concat_channels(&[mean, max])?;
        let s = self.conv.forward(g, stacked)?;
        Ok(g.tape.sigmoid(s))
    }
}

#[derive(Debug, Clone)]
pub struct Cbam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl Cbam {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        channels: usize,
        ratio: usize,
        spatial_kernel: usize,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                channel: ChannelAttention::new(b, "channel", channels, ratio)?,
                spatial: SpatialAttention::new(b, "spatial", spatial_kernel)?,
            })
        })
    }

    pub fn num_params(&self) -> usize {
        self.channel.num_params() + self.spatial.num_params()
    }

    /// `F_c = channel(M) * M`, then `spatial(F_c) * F_c`; shape is preserved.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, m: Var) -> Result<Var> {
        let cw = self.channel.forward(g, m)?;
        let fc = g.tape.mul(m, cw)?;
        let sw = self.spatial.forward(g, fc)?;
        g.tape.mul(fc, sw)
    }
}
