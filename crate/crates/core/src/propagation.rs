//! Inference: predict every frame after the first from the first frame's
//! ground-truth mask.

use crate::autodiff::Tape;
use crate::data::VideoSequence;
use crate::error::{Error, Result};
use crate::metrics::check_binary;
use crate::model::Stpfnet;
use crate::nn::Ctx;
use crate::spatial::PriorState;
use crate::temporal::MemoryBank;
use crate::tensor::{fmt_shape, Tensor};

/// Memory and prior after frames `1..t`; the next [`step`] predicts frame `t + 1`.
#[derive(Clone, Debug)]
pub struct PropagationState {
    pub memory: MemoryBank<Tensor>,
    pub prior: PriorState<Tensor>,
    /// Number of frames consumed so far (1 after [`init`]).
    pub t: usize,
}

/// Seeds memory and prior with the first frame and its binary mask.
pub fn init(model: &Stpfnet, frame: &Tensor, mask: &Tensor) -> Result<PropagationState> {
    if mask.shape() != frame.shape() {
        return Err(Error::validation(format!(
            "first mask {} does not match frame {}",
            fmt_shape(mask.shape()),
            fmt_shape(frame.shape())
        )));
    }
    check_binary(mask, "first-frame mask")?;
    let tape = Tape::no_grad();
    let ctx = Ctx::frozen(&tape, &model.params);
    let (memory, prior) = model.init_state(&ctx, tape.constant(frame.clone()), tape.constant(mask.clone()))?;
    Ok(PropagationState {
        memory: memory.detach(),
        prior: prior.detach(),
        t: 1,
    })
}

/// Predicts the probability map of `frame` and advances the state past it.
pub fn step(model: &Stpfnet, state: &mut PropagationState, frame: &Tensor) -> Result<Tensor> {
    let tape = Tape::no_grad();
    let ctx = Ctx::frozen(&tape, &model.params);
    let mut memory = state.memory.lift(&tape);
    let mut prior = state.prior.lift(&tape);
    let f = tape.constant(frame.clone());
    let out = model.frame_forward(&ctx, &memory, &prior, f)?;
    let mask = model.prior_mask(out.prob);
    model.advance(&ctx, &mut memory, &mut prior, f, mask, out.embedding.key)?;
    state.memory = memory.detach();
    state.prior = prior.detach();
    state.t += 1;
    Ok(out.prob.value())
}

/// Probability maps for frames `2..=N` of `frames` (already padded), given the
/// first mask.
pub fn propagate_frames(model: &Stpfnet, frames: &[Tensor], first_mask: &Tensor) -> Result<Vec<Tensor>> {
    let (first, rest) = frames
        .split_first()
        .ok_or_else(|| Error::validation("cannot propagate an empty sequence"))?;
    if rest.is_empty() {
        return Err(Error::validation("propagation needs at least two frames"));
    }
    let mut state = init(model, first, first_mask)?;
    rest.iter().map(|f| step(model, &mut state, f)).collect()
}

/// Propagates the sequence's first ground-truth mask and returns predictions
/// for frames `2..=N`, cropped back to the original resolution.
pub fn propagate(model: &Stpfnet, seq: &VideoSequence) -> Result<Vec<Tensor>> {
    let first = seq
        .masks
        .as_ref()
        .and_then(|m| m.first())
        .ok_or_else(|| Error::validation(format!("sequence {} has no first-frame mask", seq.name)))?;
    propagate_with(model, seq, first)
}

/// As [`propagate`] with an explicit (padded) first mask.
pub fn propagate_with(model: &Stpfnet, seq: &VideoSequence, first_mask: &Tensor) -> Result<Vec<Tensor>> {
    propagate_frames(model, &seq.frames, first_mask)?
        .iter()
        .map(|p| seq.unpad(p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::EncoderConfig;
    use crate::data::{synth_generate, Padding, SynthConfig};
    use crate::model::ModelConfig;

    fn tiny(config: ModelConfig) -> Stpfnet {
        let config = ModelConfig {
            encoder: EncoderConfig {
                in_channels: 1,
                stage_channels: vec![4, 8, 16],
            },
            ..config
        };
        Stpfnet::new(&config, 7).unwrap()
    }

    fn clip(frames: usize) -> VideoSequence {
        let cfg = SynthConfig {
            height: 32,
            width: 32,
            frames,
            axis_min: 4.0,
            axis_max: 6.0,
            ..SynthConfig::default()
        };
        synth_generate(&cfg, 5, "s").unwrap()
    }

    #[test]
    fn init_seeds_one_entry_and_exact_prior() {
        let m = tiny(ModelConfig::default());
        let seq = clip(2);
        let gt = &seq.masks.as_ref().unwrap()[0];
        let s = init(&m, &seq.frames[0], gt).unwrap();
        assert_eq!(s.memory.len(), 1);
        assert!(s.prior.prev_mask.bitwise_eq(gt));
        let again = init(&m, &seq.frames[0], gt).unwrap();
        assert!(again.memory.keys()[0].bitwise_eq(&s.memory.keys()[0]));
    }

    #[test]
    fn init_rejects_soft_or_mismatched_masks() {
        let m = tiny(ModelConfig::default());
        let f = Tensor::zeros([1, 16, 16]);
        assert!(matches!(init(&m, &f, &Tensor::full([1, 16, 16], 0.5)), Err(Error::Validation(_))));
        assert!(matches!(init(&m, &f, &Tensor::zeros([1, 8, 8])), Err(Error::Validation(_))));
    }

    #[test]
    fn memory_grows_and_respects_capacity() {
        let seq = clip(6);
        for (cap, expect) in [(None, [2, 3, 4, 5, 6]), (Some(3), [2, 3, 3, 3, 3])] {
            let m = tiny(ModelConfig {
                memory_capacity: cap,
                ..ModelConfig::default()
            });
            let mut s = init(&m, &seq.frames[0], &seq.masks.as_ref().unwrap()[0]).unwrap();
            let first_key = s.memory.keys()[0].clone();
            for (k, f) in seq.frames[1..].iter().enumerate() {
                step(&m, &mut s, f).unwrap();
                assert_eq!(s.memory.len(), expect[k]);
                assert!(s.memory.keys()[0].bitwise_eq(&first_key));
                assert!(s.prior.prev_frame.bitwise_eq(f));
            }
        }
    }

    #[test]
    fn count_range_and_determinism() {
        let m = tiny(ModelConfig::default());
        let two = clip(2);
        assert_eq!(propagate(&m, &two).unwrap().len(), 1);
        let seq = clip(4);
        let a = propagate(&m, &seq).unwrap();
        let b = propagate(&m, &seq).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.bitwise_eq(y));
            assert!(x.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn future_frames_do_not_affect_the_past() {
        let m = tiny(ModelConfig::default());
        let seq = clip(5);
        let base = propagate(&m, &seq).unwrap();
        let mut perturbed = seq.clone();
        perturbed.frames[3] = perturbed.frames[3].map(|v| 1.0 - v);
        perturbed.frames[4] = Tensor::zeros([1, 32, 32]);
        let other = propagate(&m, &perturbed).unwrap();
        // predictions for frames 2 and 3 only see frames 1..3
        assert!(base[0].bitwise_eq(&other[0]));
        assert!(base[1].bitwise_eq(&other[1]));
        assert!(!base[2].bitwise_eq(&other[2]));
    }

    #[test]
    fn predictions_are_cropped_to_original_size() {
        let m = tiny(ModelConfig::default());
        let seq = clip(3);
        // crop 32x32 frames to 30x28, then pad back up as the loader does
        let crop = Padding { top: 1, bottom: 1, left: 2, right: 2 };
        let seq = VideoSequence {
            frames: seq.frames.iter().map(|f| crop.remove(f).unwrap()).collect(),
            masks: seq.masks.map(|ms| ms.iter().map(|m| crop.remove(m).unwrap()).collect()),
            ..seq
        }
        .pad_to(m.stride())
        .unwrap();
        assert_eq!(seq.resolution(), (32, 32));
        let preds = propagate(&m, &seq).unwrap();
        assert!(preds.iter().all(|p| p.shape() == [1, 30, 28]));
    }
}
