use serde::{Deserialize, Serialize};

use super::params::{Builder, Forward, ParamId, StatsId};
use crate::autodiff::{BatchNormConfig, Conv2dOptions, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Settings shared by every block of a network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockConfig {
    pub leaky_slope: f64,
    pub batch_norm: BatchNormConfig,
    /// SE reduction ratio; `None` picks `min(16, C)` per block.
    pub se_ratio: Option<usize>,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            leaky_slope: 0.3,
            batch_norm: BatchNormConfig::default(),
            se_ratio: None,
        }
    }
}

pub(crate) fn expect_channels(op: &'static str, shape: &[usize], channels: usize) -> Result<()> {
    match shape.last() {
        Some(&c) if c == channels => Ok(()),
        _ => {
            let mut want = shape.to_vec();
            if let Some(last) = want.last_mut() {
                *last = channels;
            }
            Err(Error::shape(op, shape, &want))
        }
    }
}

/// Stride-1, same-padded convolution with a square odd kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        with_bias: bool,
    ) -> Self {
        b.scoped(name, |b| {
            let fan_in = kernel_size * kernel_size * in_channels;
            let kernel = b.he_uniform(
                "kernel",
                &[kernel_size, kernel_size, in_channels, out_channels],
                fan_in,
            );
            let bias = with_bias.then(|| b.constant("bias", Tensor::zeros(&[out_channels])));
            Self {
                kernel,
                bias,
                kernel_size,
                in_channels,
                out_channels,
                dilation,
            }
        })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let k = f.param(self.kernel);
        let b = self.bias.map(|id| f.param(id));
        f.graph
            .conv2d(x, k, b, Conv2dOptions::dilated(self.dilation))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
    pub config: BatchNormConfig,
}

impl BatchNorm {
    pub fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        config: BatchNormConfig,
    ) -> Self {
        b.scoped(name, |b| Self {
            gamma: b.constant("gamma", Tensor::ones(&[channels])),
            beta: b.constant("beta", Tensor::zeros(&[channels])),
            stats: b.stats("running", channels),
            config,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        f.batch_norm(x, self.gamma, self.beta, self.stats, self.config)
    }
}
