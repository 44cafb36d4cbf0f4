//! Strided residual encoder, key/value projection heads and the skip-connected
//! decoder.
//!
//! Two encoders share one [`EncoderConfig`]: the query encoder sees a bare
//! grayscale frame, the memory encoder sees the frame with its mask appended
//! as a second channel. Each has its own 1×1 key (`C/8`) and value (`C/2`)
//! heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, ParamStore};
use crate::tensor::fmt_shape;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Channels of the bare frame input. The memory encoder adds one.
    pub in_channels: usize,
    /// Output channels of each stride-2 stage; the last is `C`.
    pub stage_channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_channels: vec![16, 32, 64],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::validation("in_channels must be positive"));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::validation("stage_channels must be a non-empty list of positive widths"));
        }
        let c = self.feature_channels();
        if !c.is_multiple_of(8) {
            return Err(Error::validation(format!("feature channels {c} must be divisible by 8")));
        }
        Ok(())
    }

    /// `C`, the width of the last stage.
    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated")
    }

    pub fn key_channels(&self) -> usize {
        self.feature_channels() / 8
    }

    pub fn value_channels(&self) -> usize {
        self.feature_channels() / 2
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// `2^stages`, the ratio between frame and feature resolution.
    pub fn total_stride(&self) -> usize {
        1 << self.num_stages()
    }
}

/// Outputs of one encoder pass over a frame.
#[derive(Clone, Debug)]
pub struct FrameEmbedding<'t> {
    /// Last-stage feature `[C×h×w]`.
    pub r: Var<'t>,
    /// `[C/8×h×w]`
    pub key: Var<'t>,
    /// `[C/2×h×w]`
    pub value: Var<'t>,
    /// Every stage output, shallow to deep; the last one is `r`.
    pub stages: Vec<Var<'t>>,
}

impl<'t> FrameEmbedding<'t> {
    /// Stage outputs the decoder consumes (all but the deepest).
    pub fn skips(&self) -> &[Var<'t>] {
        &self.stages[..self.stages.len() - 1]
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    res_a: Conv2d,
    res_b: Conv2d,
}

impl Stage {
    fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.down.forward(ctx, x)?.relu();
        let branch = self.res_a.forward(ctx, h)?.relu();
        let branch = self.res_b.forward(ctx, branch)?;
        Ok(h.add(&branch)?.relu())
    }

    fn num_scalars(&self) -> usize {
        self.down.num_scalars() + self.res_a.num_scalars() + self.res_b.num_scalars()
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    stages: Vec<Stage>,
    key: Conv2d,
    value: Conv2d,
    in_channels: usize,
    stride: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        config: &EncoderConfig,
        in_channels: usize,
        rng: &mut R,
    ) -> Self {
        let mut stages = Vec::new();
        let mut prev = in_channels;
        for (i, &ch) in config.stage_channels.iter().enumerate() {
            let prefix = format!("{name}.stage{}", i + 1);
            stages.push(Stage {
                down: Conv2d::new(store, &format!("{prefix}.down"), prev, ch, 3, 2, rng),
                res_a: Conv2d::new(store, &format!("{prefix}.res_a"), ch, ch, 3, 1, rng),
                res_b: Conv2d::new(store, &format!("{prefix}.res_b"), ch, ch, 3, 1, rng),
            });
            prev = ch;
        }
        let c = config.feature_channels();
        let key = Conv2d::new(store, &format!("{name}.key"), c, c / 8, 1, 1, rng);
        let value = Conv2d::new(store, &format!("{name}.value"), c, c / 2, 1, 1, rng);
        Self {
            stages,
            key,
            value,
            in_channels,
            stride: config.total_stride(),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, input: Var<'t>) -> Result<FrameEmbedding<'t>> {
        let shape = input.shape();
        let &[c, h, w] = shape.as_slice() else {
            return Err(Error::shape(format!("encoder input must be [C×H×W], got {}", fmt_shape(&shape))));
        };
        if c != self.in_channels {
            return Err(Error::shape(format!("encoder expects {} input channels, got {c}", self.in_channels)));
        }
        if h % self.stride != 0 || w % self.stride != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "frame {h}x{w} is not divisible by the encoder stride {}; pad it to a multiple of {}",
                self.stride, self.stride
            )));
        }
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut x = input;
        for stage in &self.stages {
            x = stage.forward(ctx, x)?;
            stages.push(x);
        }
        Ok(FrameEmbedding {
            r: x,
            key: self.key.forward(ctx, x)?,
            value: self.value.forward(ctx, x)?,
            stages,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.stages.iter().map(Stage::num_scalars).sum::<usize>() + self.key.num_scalars() + self.value.num_scalars()
    }
}

fn check_unit_interval(mask: &Var<'_>) -> Result<()> {
    if mask.value().data().iter().all(|v| (0.0..=1.0).contains(v)) {
        Ok(())
    } else {
        Err(Error::validation("mask values must lie in [0, 1]"))
    }
}

/// Query and memory encoders.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: EncoderConfig,
    query: Encoder,
    memory: Encoder,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            query: Encoder::new(store, "enc_q", config, config.in_channels, rng),
            memory: Encoder::new(store, "enc_m", config, config.in_channels + 1, rng),
            config: config.clone(),
        })
    }

    /// Encodes a `[1×H×W]` frame; with a mask the memory encoder is used on
    /// the two-channel stack `[frame; mask]`.
    pub fn encode<'t>(&self, ctx: &Ctx<'t>, frame: Var<'t>, mask: Option<Var<'t>>) -> Result<FrameEmbedding<'t>> {
        match mask {
            None => self.query.forward(ctx, frame),
            Some(mask) => {
                check_unit_interval(&mask)?;
                if mask.shape() != frame.shape() {
                    return Err(Error::shape(format!(
                        "mask {} does not match frame {}",
                        fmt_shape(&mask.shape()),
                        fmt_shape(&frame.shape())
                    )));
                }
                let stacked = Var::concat(&[frame, mask], 0)?;
                self.memory.forward(ctx, stacked)
            }
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.query.num_scalars() + self.memory.num_scalars()
    }
}

/// Upsample, concatenate the matching skip, convolve; repeated back to half
/// resolution, then a 3×3 head to one logit channel and a final bilinear 2×.
#[derive(Clone, Debug)]
pub struct Decoder {
    blocks: Vec<Conv2d>,
    head: Conv2d,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &EncoderConfig,
        in_channels: usize,
        rng: &mut R,
    ) -> Self {
        let mut blocks = Vec::new();
        let mut prev = in_channels;
        for (i, &skip) in config.stage_channels.iter().rev().skip(1).enumerate() {
            blocks.push(Conv2d::new(store, &format!("dec.block{}", i + 1), prev + skip, skip, 3, 1, rng));
            prev = skip;
        }
        let head = Conv2d::new(store, "dec.head", prev, 1, 3, 1, rng);
        Self { blocks, head }
    }

    /// `skips` are ordered shallow to deep, as in [`FrameEmbedding::skips`].
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, skips: &[Var<'t>]) -> Result<Var<'t>> {
        if skips.len() != self.blocks.len() {
            return Err(Error::shape(format!(
                "decoder has {} blocks but received {} skip features",
                self.blocks.len(),
                skips.len()
            )));
        }
        let mut x = x;
        for (block, skip) in self.blocks.iter().zip(skips.iter().rev()) {
            let up = x.upsample_nearest2x()?;
            let (us, ss) = (up.shape(), skip.shape());
            if us[1..] != ss[1..] {
                return Err(Error::shape(format!(
                    "upsampled feature {} does not match skip {}",
                    fmt_shape(&us),
                    fmt_shape(&ss)
                )));
            }
            x = block.forward(ctx, Var::concat(&[up, *skip], 0)?)?.relu();
        }
        self.head.forward(ctx, x)?.upsample_bilinear2x()
    }

    pub fn num_scalars(&self) -> usize {
        self.blocks.iter().map(Conv2d::num_scalars).sum::<usize>() + self.head.num_scalars()
    }
}
