//! Prior-mask gating of the current frame and the single-frame attention read
//! against the previous frame's key.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::temporal::{attend, AttentionConfig};
use crate::tensor::{fmt_shape, Tensor};

/// What the spatial branch remembers about frame `t-1`.
#[derive(Clone, Debug)]
pub struct PriorState<T> {
    /// `[1×H×W]`
    pub prev_frame: T,
    /// `[1×H×W]` probabilities.
    pub prev_mask: T,
    /// `[Ck×h×w]` key of the ungated previous frame.
    pub prev_key: T,
}

impl PriorState<Tensor> {
    pub fn lift<'t>(&self, tape: &'t Tape) -> PriorState<Var<'t>> {
        PriorState {
            prev_frame: tape.constant(self.prev_frame.clone()),
            prev_mask: tape.constant(self.prev_mask.clone()),
            prev_key: tape.constant(self.prev_key.clone()),
        }
    }
}

impl<'t> PriorState<Var<'t>> {
    pub fn detach(&self) -> PriorState<Tensor> {
        PriorState {
            prev_frame: self.prev_frame.value(),
            prev_mask: self.prev_mask.value(),
            prev_key: self.prev_key.value(),
        }
    }
}

/// Gates `frame` by the previous prediction `mask` at image resolution.
pub fn apply_prior<'t>(mask: Var<'t>, frame: Var<'t>) -> Result<Var<'t>> {
    if mask.shape() != frame.shape() {
        return Err(Error::shape(format!(
            "prior mask {} does not match frame {}",
            fmt_shape(&mask.shape()),
            fmt_shape(&frame.shape())
        )));
    }
    if let Some(bad) = mask.value().data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::validation(format!(
            "prior mask value {bad} outside [0, 1]; pass probabilities, not logits"
        )));
    }
    mask.mul(&frame)
}

/// Attention of the current key `[Ck×h×w]` over the positions of the
/// previous frame's key, reading the prior-gated value `[Cv×h×w]`.
pub fn spatial_read<'t>(
    key: Var<'t>,
    prev_key: Var<'t>,
    gated_value: Var<'t>,
    cfg: AttentionConfig,
) -> Result<Var<'t>> {
    let (ks, ps, vs) = (key.shape(), prev_key.shape(), gated_value.shape());
    if ks.len() != 3 || ks != ps || vs.len() != 3 || vs[1..] != ps[1..] {
        return Err(Error::shape(format!(
            "spatial read: key {}, previous key {}, value {} disagree",
            fmt_shape(&ks),
            fmt_shape(&ps),
            fmt_shape(&vs)
        )));
    }
    let n = ps[1] * ps[2];
    attend(key, prev_key.reshape([ps[0], n])?, gated_value.reshape([vs[0], n])?, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gating_identities() {
        let tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = Tensor::uniform([1, 4, 4], 0.0, 1.0, &mut rng);
        let f = tape.constant(frame.clone());
        let ones = apply_prior(tape.constant(Tensor::ones([1, 4, 4])), f).unwrap().value();
        assert!(ones.bitwise_eq(&frame));
        let zeros = apply_prior(tape.constant(Tensor::zeros([1, 4, 4])), f).unwrap().value();
        assert!(zeros.data().iter().all(|&v| v == 0.0));
        let half = apply_prior(tape.constant(Tensor::full([1, 4, 4], 0.5)), tape.constant(Tensor::full([1, 4, 4], 2.0)))
            .unwrap()
            .value();
        assert!(half.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn logits_are_rejected() {
        let tape = Tape::no_grad();
        let r = apply_prior(tape.constant(Tensor::full([1, 2, 2], -3.0)), tape.constant(Tensor::ones([1, 2, 2])));
        assert!(matches!(r, Err(Error::Validation(_))));
        let r = apply_prior(tape.constant(Tensor::ones([1, 2, 3])), tape.constant(Tensor::ones([1, 2, 2])));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_previous_key_gives_channel_means() {
        let tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let value = Tensor::uniform([3, 2, 2], -1.0, 1.0, &mut rng);
        let z = spatial_read(
            tape.constant(Tensor::uniform([2, 2, 2], -1.0, 1.0, &mut rng)),
            tape.constant(Tensor::full([2, 2, 2], 0.3)),
            tape.constant(value.clone()),
            AttentionConfig::default(),
        )
        .unwrap()
        .value();
        for c in 0..3 {
            let mean = value.data()[c * 4..(c + 1) * 4].iter().sum::<f64>() / 4.0;
            assert!(z.data()[c * 4..(c + 1) * 4].iter().all(|v| (v - mean).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_value_reads_zero() {
        let tape = Tape::no_grad();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = spatial_read(
            tape.constant(Tensor::uniform([1, 2, 2], -1.0, 1.0, &mut rng)),
            tape.constant(Tensor::uniform([1, 2, 2], -1.0, 1.0, &mut rng)),
            tape.constant(Tensor::zeros([4, 2, 2])),
            AttentionConfig::default(),
        )
        .unwrap()
        .value();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_query_picks_matching_position() {
        // 2×2 previous frame; keys are one-hot over 4 channels per position.
        // Query position p carries 100·(one-hot of position (p+1) mod 4), so
        // it must read the value stored at that position.
        let tape = Tape::no_grad();
        let mut prev = vec![0.0; 16];
        for p in 0..4 {
            prev[p * 4 + p] = 1.0;
        }
        let mut query = vec![0.0; 16];
        for p in 0..4 {
            let target = (p + 1) % 4;
            query[target * 4 + p] = 100.0;
        }
        let value = Tensor::new([2, 2, 2], vec![1., 2., 3., 4., -1., -2., -3., -4.]).unwrap();
        let z = spatial_read(
            tape.constant(Tensor::new([4, 2, 2], query).unwrap()),
            tape.constant(Tensor::new([4, 2, 2], prev).unwrap()),
            tape.constant(value.clone()),
            AttentionConfig::default(),
        )
        .unwrap()
        .value();
        for c in 0..2 {
            for p in 0..4 {
                let expect = value.data()[c * 4 + (p + 1) % 4];
                assert!((z.data()[c * 4 + p] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mismatched_dims_rejected() {
        let tape = Tape::no_grad();
        let r = spatial_read(
            tape.constant(Tensor::zeros([2, 2, 2])),
            tape.constant(Tensor::zeros([2, 2, 3])),
            tape.constant(Tensor::zeros([4, 2, 2])),
            AttentionConfig::default(),
        );
        assert!(matches!(r, Err(Error::Shape(_))));
    }
}
