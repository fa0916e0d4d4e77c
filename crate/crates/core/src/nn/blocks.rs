//! Attention, residual and pyramid-pooling blocks.
//!
//! Every block here is stride-1 and same-padded, so batch and spatial
//! dimensions pass through unchanged.

use super::layers::{expect_channels, BatchNorm, BlockConfig, Conv2d};
use super::params::{Builder, Forward, ParamId};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Maps larger than this many pixels use a 7×7 spatial-attention kernel.
pub const SPATIAL_KERNEL_THRESHOLD: usize = 128 * 128;

/// Spatial-attention kernel size for a feature map of `height × width`.
pub fn spatial_kernel_size(height: usize, width: usize) -> usize {
    if height * width > SPATIAL_KERNEL_THRESHOLD {
        7
    } else {
        5
    }
}

/// Convolution → batch norm → leaky ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnLReLU {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub slope: f64,
}

impl ConvBnLReLU {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel_size: usize,
        cfg: &BlockConfig,
    ) -> Self {
        Self::dilated(b, name, in_channels, filters, kernel_size, 1, cfg)
    }

    pub fn dilated<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel_size: usize,
        dilation: usize,
        cfg: &BlockConfig,
    ) -> Self {
        b.scoped(name, |b| Self {
            conv: Conv2d::new(b, "conv", in_channels, filters, kernel_size, dilation, true),
            bn: BatchNorm::new(b, "bn", filters, cfg.batch_norm),
            slope: cfg.leaky_slope,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels
    }

    pub fn filters(&self) -> usize {
        self.conv.out_channels
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        expect_channels("conv_bn_lrelu", &f.graph.shape(x), self.in_channels())?;
        let y = self.conv.forward(f, x)?;
        let y = self.bn.forward(f, y)?;
        f.graph.leaky_relu(y, self.slope)
    }
}

/// Squeeze-and-excitation channel gating.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub channels: usize,
    pub hidden: usize,
    /// `[C, hidden]`
    pub squeeze: ParamId,
    /// `[hidden, C]`
    pub excite: ParamId,
    pub slope: f64,
}

impl SeBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        cfg: &BlockConfig,
    ) -> Self {
        let ratio = cfg.se_ratio.unwrap_or(channels.min(16)).max(1);
        let hidden = (channels / ratio).max(1);
        b.scoped(name, |b| Self {
            channels,
            hidden,
            squeeze: b.he_uniform("w1", &[channels, hidden], channels),
            excite: b.he_uniform("w2", &[hidden, channels], hidden),
            slope: cfg.leaky_slope,
        })
    }

    /// Per-channel scale factors `s`, shape `[B, C]`.
    pub fn gates<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let g = f.graph;
        expect_channels("se", &g.shape(x), self.channels)?;
        let z = g.global_avg_pool(x)?;
        let h = g.dense(z, f.param(self.squeeze), None)?;
        let h = g.leaky_relu(h, self.slope)?;
        let s = g.dense(h, f.param(self.excite), None)?;
        Ok(g.sigmoid(s))
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        f.count("se");
        let g = f.graph;
        let s = self.gates(f, x)?;
        let batch = g.shape(x)[0];
        let s = g.reshape(s, &[batch, 1, 1, self.channels])?;
        g.mul(x, s)
    }
}

/// Channel and spatial attention fusion.
///
/// Three chained conv blocks (3×3, 3×3, 1×1) feed an SE gate; the first two
/// outputs and the gated third are summed, reduced by a channel-wise max, and
/// turned into a sigmoid spatial map that rescales the module input.
#[derive(Debug, Clone)]
pub struct CsafModule {
    pub channels: usize,
    pub first: ConvBnLReLU,
    pub second: ConvBnLReLU,
    pub third: ConvBnLReLU,
    pub se: SeBlock,
    pub spatial: Conv2d,
}

impl CsafModule {
    /// `spatial_dims` is the feature-map size the module will see; it fixes
    /// the spatial-attention kernel.
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        spatial_dims: (usize, usize),
        cfg: &BlockConfig,
    ) -> Self {
        let ks = spatial_kernel_size(spatial_dims.0, spatial_dims.1);
        b.scoped(name, |b| Self {
            channels,
            first: ConvBnLReLU::new(b, "conv1", channels, channels, 3, cfg),
            second: ConvBnLReLU::new(b, "conv2", channels, channels, 3, cfg),
            third: ConvBnLReLU::new(b, "conv3", channels, channels, 1, cfg),
            se: SeBlock::new(b, "se", channels, cfg),
            spatial: Conv2d::new(b, "spatial", 1, 1, ks, 1, true),
        })
    }

    pub fn spatial_kernel(&self) -> usize {
        self.spatial.kernel_size
    }

    /// The spatial attention map `M`, shape `[B, H, W, 1]`.
    pub fn attention<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let g = f.graph;
        expect_channels("csaf", &g.shape(x), self.channels)?;
        let f1 = self.first.forward(f, x)?;
        let f2 = self.second.forward(f, f1)?;
        let f3 = self.third.forward(f, f2)?;
        let gated = self.se.forward(f, f3)?;
        let a = g.add(f1, f2)?;
        let a = g.add(a, gated)?;
        let pooled = g.channel_max(a)?;
        let m = self.spatial.forward(f, pooled)?;
        Ok(g.sigmoid(m))
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        f.count("csaf");
        let m = self.attention(f, x)?;
        f.graph.mul(x, m)
    }
}

/// Parallel 3×3 and 1×1 conv branches, summed.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub wide: ConvBnLReLU,
    pub narrow: ConvBnLReLU,
}

impl ResidualBlock {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        cfg: &BlockConfig,
    ) -> Self {
        b.scoped(name, |b| Self {
            wide: ConvBnLReLU::new(b, "conv3x3", channels, channels, 3, cfg),
            narrow: ConvBnLReLU::new(b, "conv1x1", channels, channels, 1, cfg),
        })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        f.count("residual_block");
        let a = self.wide.forward(f, x)?;
        let b = self.narrow.forward(f, x)?;
        f.graph.add(a, b)
    }
}

/// Number of residual blocks on the skip connection of encoder level `level`.
pub fn residual_depth(level: usize) -> Result<usize> {
    if (1..=4).contains(&level) {
        Ok(5 - level)
    } else {
        Err(Error::invalid(format!(
            "skip level must be in 1..=4, got {level}"
        )))
    }
}

/// Skip-connection refinement: `5 - level` chained residual blocks followed
/// by one SE block.
#[derive(Debug, Clone)]
pub struct SkipChain {
    pub level: usize,
    pub blocks: Vec<ResidualBlock>,
    pub se: SeBlock,
}

impl SkipChain {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        level: usize,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        let depth = residual_depth(level)?;
        Ok(b.scoped(name, |b| Self {
            level,
            blocks: (0..depth)
                .map(|i| ResidualBlock::new(b, &format!("res{i}"), channels, cfg))
                .collect(),
            se: SeBlock::new(b, "se", channels, cfg),
        }))
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let mut out = x;
        for block in &self.blocks {
            out = block.forward(f, out)?;
        }
        self.se.forward(f, out)
    }
}

/// Atrous spatial pyramid pooling: a 1×1 branch, one dilated 3×3 branch per
/// rate and an image-pooling branch, concatenated and fused by a 1×1 conv.
#[derive(Debug, Clone)]
pub struct Aspp {
    pub in_channels: usize,
    pub out_channels: usize,
    pub pointwise: ConvBnLReLU,
    pub dilated: Vec<ConvBnLReLU>,
    pub pooled: ConvBnLReLU,
    pub fusion: Conv2d,
}

impl Aspp {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rates: &[usize],
        cfg: &BlockConfig,
    ) -> Result<Self> {
        if rates.contains(&0) {
            return Err(Error::invalid("ASPP dilation rates must be >= 1"));
        }
        let branches = rates.len() + 2;
        Ok(b.scoped(name, |b| Self {
            in_channels,
            out_channels,
            pointwise: ConvBnLReLU::new(b, "branch_1x1", in_channels, out_channels, 1, cfg),
            dilated: rates
                .iter()
                .map(|&r| {
                    ConvBnLReLU::dilated(
                        b,
                        &format!("branch_rate{r}"),
                        in_channels,
                        out_channels,
                        3,
                        r,
                        cfg,
                    )
                })
                .collect(),
            pooled: ConvBnLReLU::new(b, "branch_pool", in_channels, out_channels, 1, cfg),
            fusion: Conv2d::new(
                b,
                "fusion",
                branches * out_channels,
                out_channels,
                1,
                1,
                true,
            ),
        }))
    }

    pub fn branch_count(&self) -> usize {
        self.dilated.len() + 2
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        f.count("aspp");
        let g = f.graph;
        let shape = g.shape(x);
        expect_channels("aspp", &shape, self.in_channels)?;
        let (batch, h, w) = (shape[0], shape[1], shape[2]);

        let mut outs = Vec::with_capacity(self.branch_count());
        outs.push(self.pointwise.forward(f, x)?);
        for branch in &self.dilated {
            outs.push(branch.forward(f, x)?);
        }
        let pooled = g.global_avg_pool(x)?;
        let pooled = g.reshape(pooled, &[batch, 1, 1, self.in_channels])?;
        let pooled = self.pooled.forward(f, pooled)?;
        outs.push(g.expand(pooled, &[batch, h, w, self.out_channels])?);

        let cat = g.concat(&outs)?;
        self.fusion.forward(f, cat)
    }
}
