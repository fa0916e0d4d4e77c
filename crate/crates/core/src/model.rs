//! OCU-Net topology.
//!
//! Encoder: four levels of conv block + SE. Levels 3 and 4 take the two
//! preceding levels' features, max-pooled to their resolution and refined by
//! one residual block each, concatenate them, and end in a CSAF module. Every
//! level is followed by 2×2 max pooling.
//!
//! Bottleneck: ASPP.
//!
//! Decoder: four levels, deepest first. Each upsamples the previous decoder
//! output, concatenates the skip chain of the matching encoder level (with
//! `5 - level` residual blocks), and applies a conv block and a CSAF module.
//! The two shallowest levels also concatenate the output of the decoder level
//! two steps back, upsampled 4×.
//!
//! Head: 1×1 conv to the class count, softmax for two or more classes and a
//! sigmoid for one.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{
    Aspp, BlockConfig, Builder, Conv2d, ConvBnLReLU, CsafModule, Forward, ParamStore,
    ResidualBlock, SeBlock, SkipChain,
};
use crate::tensor::{Scalar, Tensor};

pub const INPUT_CHANNELS: usize = 3;
pub const LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Level-1 width; widths double per level unless `channel_schedule` is set.
    pub base_channels: usize,
    /// Explicit widths for levels 1..=4.
    pub channel_schedule: Option<[usize; 4]>,
    /// ASPP width; twice the level-4 width when unset.
    pub bottleneck_channels: Option<usize>,
    pub num_classes: usize,
    /// `[height, width]`
    pub input_size: [usize; 2],
    pub aspp_rates: Vec<usize>,
    pub blocks: BlockConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_schedule: None,
            bottleneck_channels: None,
            num_classes: 3,
            input_size: [512, 512],
            aspp_rates: vec![1, 6, 12, 18],
            blocks: BlockConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn tiny(base_channels: usize, size: usize, num_classes: usize) -> Self {
        Self {
            base_channels,
            num_classes,
            input_size: [size, size],
            ..Self::default()
        }
    }

    pub fn widths(&self) -> [usize; 4] {
        self.channel_schedule.unwrap_or_else(|| {
            let c = self.base_channels;
            [c, 2 * c, 4 * c, 8 * c]
        })
    }

    pub fn bottleneck_width(&self) -> usize {
        self.bottleneck_channels
            .unwrap_or_else(|| 2 * self.widths()[3])
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be positive and divisible by 16"
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        if self.widths().contains(&0) || self.bottleneck_width() == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.aspp_rates.contains(&0) {
            return Err(Error::Config("ASPP rates must be >= 1".into()));
        }
        let slope = self.blocks.leaky_slope;
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Config(format!(
                "leaky slope must lie in [0, 1), got {slope}"
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Two conv + BN + leaky-ReLU layers, both 3×3.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub layers: [ConvBnLReLU; 2],
}

impl ConvBlock {
    fn new<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        filters: usize,
        cfg: &BlockConfig,
    ) -> Self {
        b.scoped(name, |b| Self {
            layers: [
                ConvBnLReLU::new(b, "a", in_channels, filters, 3, cfg),
                ConvBnLReLU::new(b, "b", filters, filters, 3, cfg),
            ],
        })
    }

    fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let y = self.layers[0].forward(f, x)?;
        self.layers[1].forward(f, y)
    }
}

/// Residual refinement of the two preceding encoder levels.
#[derive(Debug, Clone)]
pub struct EncoderFusion {
    /// Applied to level `ℓ-1` after one pooling.
    pub previous: ResidualBlock,
    /// Applied to level `ℓ-2` after two poolings.
    pub earlier: ResidualBlock,
}

#[derive(Debug, Clone)]
pub struct EncoderLevel {
    pub level: usize,
    pub fusion: Option<EncoderFusion>,
    pub conv: ConvBlock,
    pub se: SeBlock,
    pub csaf: Option<CsafModule>,
}

#[derive(Debug, Clone)]
pub struct DecoderLevel {
    pub level: usize,
    /// Whether the output of the decoder level two steps deeper is fused in.
    pub multi_scale: bool,
    pub conv: ConvBlock,
    pub csaf: CsafModule,
}

/// Counts of structural units, taken by walking the built network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inventory {
    pub csaf_modules: usize,
    pub encoder_csaf: usize,
    pub decoder_csaf: usize,
    pub aspp_modules: usize,
    /// Residual blocks on the skip connection of levels 1..=4.
    pub skip_residual_blocks: [usize; 4],
    pub encoder_fusion_residual_blocks: usize,
    pub se_blocks: usize,
}

#[derive(Debug, Clone)]
pub struct OcuNet {
    pub config: ModelConfig,
    pub encoder: Vec<EncoderLevel>,
    pub bottleneck: Aspp,
    /// Indexed by level - 1.
    pub skips: Vec<SkipChain>,
    /// Ordered deepest (level 4) first, as evaluated.
    pub decoder: Vec<DecoderLevel>,
    pub head: Conv2d,
}

impl OcuNet {
    /// Builds the network, registering its parameters in `store`.
    pub fn build<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config.blocks;
        let w = config.widths();
        let [h0, w0] = config.input_size;
        let dims = |level: usize| (h0 >> (level - 1), w0 >> (level - 1));
        let mut b = Builder::new(store, seed);

        let mut encoder = Vec::with_capacity(LEVELS);
        for level in 1..=LEVELS {
            let name = format!("enc{level}");
            let enc = b.scoped(&name, |b| {
                let (fusion, in_ch) = if level >= 3 {
                    let fusion = EncoderFusion {
                        previous: ResidualBlock::new(b, "ms_prev", w[level - 2], cfg),
                        earlier: ResidualBlock::new(b, "ms_earlier", w[level - 3], cfg),
                    };
                    (Some(fusion), w[level - 2] + w[level - 3])
                } else if level == 2 {
                    (None, w[0])
                } else {
                    (None, INPUT_CHANNELS)
                };
                let conv = ConvBlock::new(b, "conv", in_ch, w[level - 1], cfg);
                let se = SeBlock::new(b, "se", w[level - 1], cfg);
                let csaf = (level >= 3)
                    .then(|| CsafModule::new(b, "csaf", w[level - 1], dims(level), cfg));
                EncoderLevel {
                    level,
                    fusion,
                    conv,
                    se,
                    csaf,
                }
            });
            encoder.push(enc);
        }

        let bottleneck = Aspp::new(
            &mut b,
            "bottleneck",
            w[3],
            config.bottleneck_width(),
            &config.aspp_rates,
            cfg,
        )?;

        let skips = (1..=LEVELS)
            .map(|level| SkipChain::new(&mut b, &format!("skip{level}"), w[level - 1], level, cfg))
            .collect::<Result<Vec<_>>>()?;

        let mut decoder = Vec::with_capacity(LEVELS);
        for level in (1..=LEVELS).rev() {
            let below = if level == LEVELS {
                config.bottleneck_width()
            } else {
                w[level]
            };
            let multi_scale = level <= 2;
            let mut in_ch = below + w[level - 1];
            if multi_scale {
                in_ch += w[level + 1];
            }
            let dec = b.scoped(&format!("dec{level}"), |b| DecoderLevel {
                level,
                multi_scale,
                conv: ConvBlock::new(b, "conv", in_ch, w[level - 1], cfg),
                csaf: CsafModule::new(b, "csaf", w[level - 1], dims(level), cfg),
            });
            decoder.push(dec);
        }

        let head = Conv2d::new(&mut b, "head", w[0], config.num_classes, 1, 1, true);

        Ok(Self {
            config: config.clone(),
            encoder,
            bottleneck,
            skips,
            decoder,
            head,
        })
    }

    pub fn inventory(&self) -> Inventory {
        let encoder_csaf = self.encoder.iter().filter(|e| e.csaf.is_some()).count();
        let decoder_csaf = self.decoder.len();
        let mut skip_residual_blocks = [0; 4];
        for chain in &self.skips {
            skip_residual_blocks[chain.level - 1] = chain.blocks.len();
        }
        let csaf_se = encoder_csaf + decoder_csaf;
        Inventory {
            csaf_modules: encoder_csaf + decoder_csaf,
            encoder_csaf,
            decoder_csaf,
            aspp_modules: 1,
            skip_residual_blocks,
            encoder_fusion_residual_blocks: self
                .encoder
                .iter()
                .filter(|e| e.fusion.is_some())
                .count()
                * 2,
            se_blocks: self.encoder.len() + self.skips.len() + csaf_se,
        }
    }

    /// Per-pixel class probabilities, `[B, H, W, num_classes]`.
    pub fn forward<T: Scalar>(&self, f: &Forward<'_, T>, x: Var) -> Result<Var> {
        let g = f.graph;
        let shape = g.shape(x);
        let [h, w] = self.config.input_size;
        match shape[..] {
            [_, xh, xw, INPUT_CHANNELS] if xh == h && xw == w => {}
            _ => {
                let batch = shape.first().copied().unwrap_or(1);
                return Err(Error::ShapeMismatch {
                    op: "ocunet input",
                    left: shape,
                    right: vec![batch, h, w, INPUT_CHANNELS],
                });
            }
        }

        // Encoder.
        let mut features: Vec<Var> = Vec::with_capacity(LEVELS);
        let mut pooled: Vec<Var> = Vec::with_capacity(LEVELS);
        for enc in &self.encoder {
            let input = match (&enc.fusion, enc.level) {
                (None, 1) => x,
                (None, _) => pooled[enc.level - 2],
                (Some(fusion), level) => {
                    let prev = fusion.previous.forward(f, pooled[level - 2])?;
                    let earlier = g.max_pool2(pooled[level - 3])?;
                    let earlier = fusion.earlier.forward(f, earlier)?;
                    g.concat(&[prev, earlier])?
                }
            };
            let mut y = enc.conv.forward(f, input)?;
            y = enc.se.forward(f, y)?;
            if let Some(csaf) = &enc.csaf {
                y = csaf.forward(f, y)?;
            }
            features.push(y);
            pooled.push(g.max_pool2(y)?);
        }

        // Bottleneck.
        let mut below = self.bottleneck.forward(f, pooled[LEVELS - 1])?;

        // Decoder, deepest level first.
        let mut outputs: Vec<Var> = Vec::with_capacity(LEVELS);
        for dec in &self.decoder {
            let skip = self.skips[dec.level - 1].forward(f, features[dec.level - 1])?;
            let mut parts = vec![g.upsample2x(below)?, skip];
            if dec.multi_scale {
                let two_back = outputs[outputs.len() - 2];
                parts.push(g.upsample(two_back, 4)?);
            }
            let cat = g.concat(&parts)?;
            let y = dec.conv.forward(f, cat)?;
            let y = dec.csaf.forward(f, y)?;
            outputs.push(y);
            below = y;
        }

        let logits = self.head.forward(f, below)?;
        Ok(if self.config.num_classes >= 2 {
            g.softmax(logits)
        } else {
            g.sigmoid(logits)
        })
    }
}

/// A network together with its parameter registry.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub net: OcuNet,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = OcuNet::build(config, &mut params, seed)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Evaluation-mode probabilities for a `[B, H, W, 3]` batch.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let graph = Graph::new();
        let f = Forward::eval(&graph, &self.params);
        let x = graph.constant(batch.clone());
        let y = self.net.forward(&f, x)?;
        Ok(graph.value(y))
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }
}
