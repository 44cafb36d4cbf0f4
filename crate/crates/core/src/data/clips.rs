//! Three-frame training clips.

use rand::Rng;

use super::dataset::VideoSequence;
use crate::tensor::Tensor;

pub const CLIP_LEN: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub sequence: String,
    pub start: usize,
    pub frames: [Tensor; CLIP_LEN],
    pub masks: [Tensor; CLIP_LEN],
}

/// The clip starting at `start`, or `None` if the sequence lacks masks or
/// frames.
pub fn clip_at(seq: &VideoSequence, start: usize) -> Option<Clip> {
    let masks = seq.masks.as_ref()?;
    if start + CLIP_LEN > seq.len() {
        return None;
    }
    Some(Clip {
        sequence: seq.name.clone(),
        start,
        frames: std::array::from_fn(|i| seq.frames[start + i].clone()),
        masks: std::array::from_fn(|i| masks[start + i].clone()),
    })
}

/// Endless stream of clips: a uniformly chosen eligible sequence, then a
/// uniformly chosen start index. Sequences shorter than three frames or
/// without masks are skipped with a warning.
pub struct ClipSampler<'a, R> {
    sequences: Vec<&'a VideoSequence>,
    rng: R,
}

impl<'a, R: Rng> ClipSampler<'a, R> {
    pub fn new(sequences: impl IntoIterator<Item = &'a VideoSequence>, rng: R) -> Self {
        let sequences = sequences
            .into_iter()
            .filter(|s| {
                let ok = s.len() >= CLIP_LEN && s.masks.is_some();
                if !ok {
                    log::warn!("skipping sequence {} for clip sampling: needs {CLIP_LEN} annotated frames", s.name);
                }
                ok
            })
            .collect();
        Self { sequences, rng }
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn rng(&self) -> &R {
        &self.rng
    }
}

impl<R: Rng> Iterator for ClipSampler<'_, R> {
    type Item = Clip;

    fn next(&mut self) -> Option<Clip> {
        if self.sequences.is_empty() {
            return None;
        }
        let seq = self.sequences[self.rng.random_range(0..self.sequences.len())];
        let start = self.rng.random_range(0..=seq.len() - CLIP_LEN);
        clip_at(seq, start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::Padding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(name: &str, n: usize) -> VideoSequence {
        VideoSequence {
            name: name.into(),
            frames: (0..n).map(|i| Tensor::full([1, 2, 2], i as f64)).collect(),
            masks: Some(vec![Tensor::zeros([1, 2, 2]); n]),
            label: None,
            padding: Padding::default(),
        }
    }

    #[test]
    fn length_three_has_one_start() {
        let s = seq("a", 3);
        let starts: Vec<_> = ClipSampler::new([&s], ChaCha8Rng::seed_from_u64(0)).take(20).map(|c| c.start).collect();
        assert!(starts.iter().all(|&i| i == 0));
    }

    #[test]
    fn starts_are_in_range_and_consecutive() {
        let s = seq("a", 5);
        for c in ClipSampler::new([&s], ChaCha8Rng::seed_from_u64(1)).take(50) {
            assert!(c.start <= 2);
            for (i, f) in c.frames.iter().enumerate() {
                assert_eq!(f.data()[0], (c.start + i) as f64);
            }
        }
    }

    #[test]
    fn short_and_unannotated_sequences_skipped() {
        let short = seq("short", 2);
        let mut bare = seq("bare", 4);
        bare.masks = None;
        assert!(ClipSampler::new([&short, &bare], ChaCha8Rng::seed_from_u64(0)).is_empty());
        let ok = seq("ok", 4);
        let names: Vec<_> = ClipSampler::new([&short, &ok, &bare], ChaCha8Rng::seed_from_u64(0))
            .take(10)
            .map(|c| c.sequence)
            .collect();
        assert!(names.iter().all(|n| n == "ok"));
    }

    #[test]
    fn seeded_order_repeats() {
        let (a, b) = (seq("a", 6), seq("b", 4));
        let run = || {
            ClipSampler::new([&a, &b], ChaCha8Rng::seed_from_u64(9))
                .take(30)
                .map(|c| (c.sequence, c.start))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
