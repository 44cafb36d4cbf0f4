//! The full network: encoders, temporal and spatial reads, fusion and decoder,
//! plus the per-frame forward pass shared by training and inference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::{Backbone, Decoder, EncoderConfig, FrameEmbedding};
use crate::error::{Error, Result};
use crate::metrics::{binarize, DEFAULT_THRESHOLD};
use crate::msff::{BranchFeatures, Msff, Pooling};
use crate::nn::{Conv2d, Ctx, ParamStore};
use crate::spatial::{apply_prior, spatial_read, PriorState};
use crate::temporal::{memory_read, AttentionConfig, MemoryBank, Similarity};
use crate::tensor::fmt_shape;

/// Architecture and ablation switches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Spatial branch (prior gating plus read against the previous frame).
    pub sfm: bool,
    /// Multi-scale fusion; when off, branches are combined without weights.
    pub msff: bool,
    pub pooling: Pooling,
    /// Hidden width of the fusion heads is `C′ / reduction`.
    pub reduction: usize,
    /// Which encoder depth feeds the coarse branch: 4 is the deepest stage,
    /// 3 the one before it, 2 the one before that.
    pub encoder_tap: usize,
    /// Gate the current frame by the previous prediction before encoding the
    /// spatial value. When off, the ungated current value is read instead.
    pub prior_mask_mapping: bool,
    pub similarity: Similarity,
    pub key_scaling: bool,
    /// Read the spatial branch against the gated frame's own key instead of
    /// the previous frame's key.
    pub key_from_gated: bool,
    /// Append the current frame's value to the decoder input.
    pub use_current_value: bool,
    /// Binarize predictions at 0.5 before they gate or enter memory.
    pub hard_prior: bool,
    /// Memory size limit (first frame always kept); `None` keeps every frame.
    pub memory_capacity: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            sfm: true,
            msff: true,
            pooling: Pooling::Both,
            reduction: 4,
            encoder_tap: 4,
            prior_mask_mapping: true,
            similarity: Similarity::Softmax,
            key_scaling: true,
            key_from_gated: false,
            use_current_value: false,
            hard_prior: false,
            memory_capacity: None,
        }
    }
}

impl ModelConfig {
    /// Temporal read only.
    pub fn baseline() -> Self {
        Self {
            sfm: false,
            msff: false,
            ..Self::default()
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            similarity: self.similarity,
            key_scaling: self.key_scaling,
        }
    }

    /// 1-based encoder stage feeding the coarse branch.
    pub fn tap_stage(&self) -> Result<usize> {
        let n = self.encoder.num_stages();
        if !(2..=4).contains(&self.encoder_tap) || n + self.encoder_tap < 5 {
            return Err(Error::validation(format!(
                "encoder_tap {} is not available with {n} encoder stages (taps 2..=4 map to the deepest three stages)",
                self.encoder_tap
            )));
        }
        Ok(n + self.encoder_tap - 4)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.reduction == 0 {
            return Err(Error::validation("reduction must be positive"));
        }
        if self.memory_capacity == Some(0) {
            return Err(Error::validation("memory_capacity must be at least 1"));
        }
        if self.msff {
            self.tap_stage()?;
        }
        Ok(())
    }

    /// Short row label: which of the spatial branch and fusion are on.
    pub fn variant_name(&self) -> &'static str {
        match (self.sfm, self.msff) {
            (false, false) => "baseline",
            (false, true) => "+msff",
            (true, false) => "+sfm",
            (true, true) => "full",
        }
    }
}

/// Coarse branch: the tapped stage pooled to feature resolution and projected
/// to `C/8` channels.
#[derive(Clone, Debug)]
struct Tap {
    stage: usize,
    window: usize,
    proj: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Stpfnet {
    pub config: ModelConfig,
    pub params: ParamStore,
    backbone: Backbone,
    decoder: Decoder,
    tap: Option<Tap>,
    msff: Option<Msff>,
    /// `[y; z] → C/2` when the spatial branch is on without fusion.
    reduce: Option<Conv2d>,
}

/// What one frame step produces.
pub struct FrameOutput<'t> {
    pub logits: Var<'t>,
    /// `sigmoid(logits)`, `[1×H×W]`.
    pub prob: Var<'t>,
    /// Query-encoder embedding of the frame.
    pub embedding: FrameEmbedding<'t>,
}

impl Stpfnet {
    /// Builds the network with parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let enc = &config.encoder;
        let backbone = Backbone::new(&mut params, enc, &mut rng)?;
        let (c, cv, ck) = (enc.feature_channels(), enc.value_channels(), enc.key_channels());
        let tap = if config.msff {
            let stage = config.tap_stage()?;
            let in_ch = enc.stage_channels[stage - 1];
            Some(Tap {
                stage,
                window: 1 << (enc.num_stages() - stage),
                proj: Conv2d::new(&mut params, "tap", in_ch, ck, 1, 1, &mut rng),
            })
        } else {
            None
        };
        let msff = config
            .msff
            .then(|| Msff::new(&mut params, c, config.reduction, config.pooling, config.sfm, &mut rng));
        let reduce = (config.sfm && !config.msff).then(|| Conv2d::new(&mut params, "reduce", 2 * cv, cv, 1, 1, &mut rng));
        let dec_in = if config.use_current_value { 2 * cv } else { cv };
        let decoder = Decoder::new(&mut params, enc, dec_in, &mut rng);
        Ok(Self {
            config: config.clone(),
            params,
            backbone,
            decoder,
            tap,
            msff,
            reduce,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn stride(&self) -> usize {
        self.config.encoder.total_stride()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.num_scalars()
    }

    /// Applies `hard_prior` to a predicted probability map.
    pub fn prior_mask<'t>(&self, prob: Var<'t>) -> Var<'t> {
        if self.config.hard_prior {
            prob.tape().constant(binarize(&prob.value(), DEFAULT_THRESHOLD))
        } else {
            prob
        }
    }

    /// Memory-encoder key and value of a frame with its mask.
    pub fn memory_entry<'t>(&self, ctx: &Ctx<'t>, frame: Var<'t>, mask: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let e = self.backbone.encode(ctx, frame, Some(mask))?;
        Ok((e.key, e.value))
    }

    /// Memory seeded with the first frame and its mask, prior pointing at it.
    pub fn init_state<'t>(
        &self,
        ctx: &Ctx<'t>,
        frame: Var<'t>,
        mask: Var<'t>,
    ) -> Result<(MemoryBank<Var<'t>>, PriorState<Var<'t>>)> {
        let mut memory = MemoryBank::new(self.config.memory_capacity);
        let (k, v) = self.memory_entry(ctx, frame, mask)?;
        memory.append(k, v)?;
        let key = self.backbone.encode(ctx, frame, None)?.key;
        Ok((
            memory,
            PriorState {
                prev_frame: frame,
                prev_mask: mask,
                prev_key: key,
            },
        ))
    }

    /// Predicts the mask of `frame` from the memory and the prior.
    pub fn frame_forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        memory: &MemoryBank<Var<'t>>,
        prior: &PriorState<Var<'t>>,
        frame: Var<'t>,
    ) -> Result<FrameOutput<'t>> {
        if frame.shape() != prior.prev_frame.shape() {
            return Err(Error::shape(format!(
                "frame {} does not match the sequence resolution {}",
                fmt_shape(&frame.shape()),
                fmt_shape(&prior.prev_frame.shape())
            )));
        }
        let cfg = &self.config;
        let attn = cfg.attention();
        let e = self.backbone.encode(ctx, frame, None)?;
        let y = memory_read(memory, e.key, attn)?;

        let z = if cfg.sfm {
            let (value, key_side) = if cfg.prior_mask_mapping {
                let gated = apply_prior(prior.prev_mask, frame)?;
                let g = self.backbone.encode(ctx, gated, None)?;
                (g.value, if cfg.key_from_gated { g.key } else { prior.prev_key })
            } else {
                (e.value, prior.prev_key)
            };
            Some(spatial_read(e.key, key_side, value, attn)?)
        } else {
            None
        };

        let mut x = match (&self.msff, &self.tap) {
            (Some(msff), Some(tap)) => {
                let pooled = e.stages[tap.stage - 1].avg_pool(tap.window)?;
                let w = tap.proj.forward(ctx, pooled)?;
                msff.fuse(ctx, &BranchFeatures { y, z, w })?
            }
            _ => match (z, &self.reduce) {
                (Some(z), Some(reduce)) => reduce.forward(ctx, Var::concat(&[y, z], 0)?)?,
                _ => y,
            },
        };
        if cfg.use_current_value {
            x = Var::concat(&[x, e.value], 0)?;
        }
        let logits = self.decoder.forward(ctx, x, e.skips())?;
        Ok(FrameOutput {
            prob: logits.sigmoid(),
            logits,
            embedding: e,
        })
    }

    /// Admits `frame` with `mask` to memory and moves the prior to it.
    pub fn advance<'t>(
        &self,
        ctx: &Ctx<'t>,
        memory: &mut MemoryBank<Var<'t>>,
        prior: &mut PriorState<Var<'t>>,
        frame: Var<'t>,
        mask: Var<'t>,
        key: Var<'t>,
    ) -> Result<()> {
        let (k, v) = self.memory_entry(ctx, frame, mask)?;
        memory.append(k, v)?;
        *prior = PriorState {
            prev_frame: frame,
            prev_mask: mask,
            prev_key: key,
        };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn default_parameter_count() {
        let m = Stpfnet::new(&ModelConfig::default(), 0).unwrap();
        // encoders 122888 + 123032, decoder 25537, tap 520, lift 288, heads 3·808
        assert_eq!(m.num_scalars(), 274_689);
        let base = Stpfnet::new(&ModelConfig::baseline(), 0).unwrap();
        assert_eq!(base.num_scalars(), 122_888 + 123_032 + 25_537);
    }

    #[test]
    fn tap_mapping() {
        let mut c = ModelConfig::default();
        for (tap, stage) in [(4, 3), (3, 2), (2, 1)] {
            c.encoder_tap = tap;
            assert_eq!(c.tap_stage().unwrap(), stage);
        }
        c.encoder_tap = 2;
        c.encoder.stage_channels = vec![16, 64];
        assert!(c.tap_stage().is_err());
        c.encoder_tap = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn every_variant_predicts_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = Tensor::uniform([1, 16, 16], 0.0, 1.0, &mut rng);
        let mask = frame.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
        for (sfm, msff) in [(false, false), (false, true), (true, false), (true, true)] {
            for extra in [false, true] {
                let config = ModelConfig {
                    encoder: EncoderConfig {
                        in_channels: 1,
                        stage_channels: vec![4, 8, 16],
                    },
                    sfm,
                    msff,
                    use_current_value: extra,
                    prior_mask_mapping: !extra,
                    key_from_gated: extra,
                    encoder_tap: if extra { 3 } else { 4 },
                    ..ModelConfig::default()
                };
                let m = Stpfnet::new(&config, 1).unwrap();
                let tape = Tape::no_grad();
                let ctx = Ctx::frozen(&tape, &m.params);
                let (f, g) = (tape.constant(frame.clone()), tape.constant(mask.clone()));
                let (memory, prior) = m.init_state(&ctx, f, g).unwrap();
                let out = m.frame_forward(&ctx, &memory, &prior, f).unwrap();
                let p = out.prob.value();
                assert_eq!(p.shape(), &[1, 16, 16]);
                assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0), "{}", config.variant_name());
            }
        }
    }

    #[test]
    fn resolution_change_rejected() {
        let config = ModelConfig {
            encoder: EncoderConfig {
                in_channels: 1,
                stage_channels: vec![8, 8, 8],
            },
            ..ModelConfig::default()
        };
        let m = Stpfnet::new(&config, 0).unwrap();
        let tape = Tape::no_grad();
        let ctx = Ctx::frozen(&tape, &m.params);
        let f = tape.constant(Tensor::zeros([1, 16, 16]));
        let (memory, prior) = m.init_state(&ctx, f, f).unwrap();
        let other = tape.constant(Tensor::zeros([1, 16, 24]));
        assert!(matches!(m.frame_forward(&ctx, &memory, &prior, other), Err(Error::Shape(_))));
    }
}
