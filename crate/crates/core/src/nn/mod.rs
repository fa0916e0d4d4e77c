//! Parameterized building blocks.

mod blocks;
mod layers;
mod params;

pub use blocks::{
    residual_depth, spatial_kernel_size, Aspp, ConvBnLReLU, CsafModule, ResidualBlock, SeBlock,
    SkipChain, SPATIAL_KERNEL_THRESHOLD,
};
pub use layers::{BatchNorm, BlockConfig, Conv2d};
pub use params::{Builder, Forward, ParamId, ParamStore, StatsId};
