//! Key/value memory of past frames and the attention read against it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Tensor};

/// How key similarities become attention weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    /// Stabilized softmax of the dot-product scores.
    #[default]
    Softmax,
    /// `softmax(exp(score))`, the double exponential taken literally. Scores
    /// are clamped at 700 so the inner exponential stays finite.
    DoubleExp,
}

impl std::str::FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Self::Softmax),
            "double-exp" => Ok(Self::DoubleExp),
            other => Err(Error::validation(format!(
                "unknown similarity {other:?} (expected softmax or double-exp)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub similarity: Similarity,
    /// Divide scores by `sqrt(key channels)`.
    pub key_scaling: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            similarity: Similarity::Softmax,
            key_scaling: true,
        }
    }
}

const LITERAL_SCORE_LIMIT: f64 = 700.0;

/// Attention of every query position over `N` memory positions.
///
/// `query` is `[Ck×h×w]`, `keys` is `[Ck×N]`; returns `[h·w×N]` with rows
/// summing to one.
pub fn attention_weights<'t>(query: Var<'t>, keys: Var<'t>, cfg: AttentionConfig) -> Result<Var<'t>> {
    let qs = query.shape();
    let ks = keys.shape();
    let (&[ck, h, w], &[ck2, _]) = (qs.as_slice(), ks.as_slice()) else {
        return Err(Error::shape(format!(
            "attention: query {} must be [Ck×h×w] and keys {} [Ck×N]",
            fmt_shape(&qs),
            fmt_shape(&ks)
        )));
    };
    if ck != ck2 {
        return Err(Error::shape(format!(
            "attention: query has {ck} key channels, memory has {ck2}"
        )));
    }
    let q = query.reshape([ck, h * w])?.transpose()?;
    let mut scores = q.matmul(&keys)?;
    if cfg.key_scaling {
        scores = scores.scale(1.0 / (ck as f64).sqrt());
    }
    match cfg.similarity {
        Similarity::Softmax => scores.softmax_rows(),
        Similarity::DoubleExp => scores.clamp_max(LITERAL_SCORE_LIMIT).exp().softmax_rows(),
    }
}

/// Reads `values: [Cv×N]` with the attention of `query` over `keys`, giving
/// `[Cv×h×w]`. Each output position is a convex combination of the `N` value
/// vectors.
pub fn attend<'t>(query: Var<'t>, keys: Var<'t>, values: Var<'t>, cfg: AttentionConfig) -> Result<Var<'t>> {
    let qs = query.shape();
    let vs = values.shape();
    let ks = keys.shape();
    if vs.len() != 2 || ks.len() != 2 || vs[1] != ks[1] {
        return Err(Error::shape(format!(
            "attention: keys {} and values {} must share the memory axis",
            fmt_shape(&ks),
            fmt_shape(&vs)
        )));
    }
    let attn = attention_weights(query, keys, cfg)?;
    let y = values.matmul(&attn.transpose()?)?;
    y.reshape([vs[0], qs[1], qs[2]])
}

/// Shape access shared by plain tensors and tape variables.
pub trait Shaped {
    fn dims(&self) -> Vec<usize>;
}

impl Shaped for Tensor {
    fn dims(&self) -> Vec<usize> {
        self.shape().to_vec()
    }
}

impl Shaped for Var<'_> {
    fn dims(&self) -> Vec<usize> {
        self.shape()
    }
}

/// Keys `[Ck×h×w]` and values `[Cv×h×w]` of past frames in insertion order.
/// When a capacity is set the first entry is pinned and the oldest of the
/// others is evicted on overflow.
#[derive(Clone, Debug)]
pub struct MemoryBank<T> {
    keys: Vec<T>,
    values: Vec<T>,
    capacity: Option<usize>,
}

impl<T> Default for MemoryBank<T> {
    fn default() -> Self {
        Self::new(None)
    }
}

impl<T> MemoryBank<T> {
    pub fn new(capacity: Option<usize>) -> Self {
        assert!(capacity != Some(0), "memory capacity must be at least 1");
        Self {
            keys: Vec::new(),
            values: Vec::new(),
            capacity,
        }
    }

    /// Number of stored frames (`T`).
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn keys(&self) -> &[T] {
        &self.keys
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> MemoryBank<U> {
        MemoryBank {
            keys: self.keys.iter().map(&mut f).collect(),
            values: self.values.iter().map(&mut f).collect(),
            capacity: self.capacity,
        }
    }

    /// Reorders the entries; `order[i]` is the old index of new entry `i`.
    pub fn permuted(&self, order: &[usize]) -> Self
    where
        T: Clone,
    {
        assert_eq!(order.len(), self.len());
        Self {
            keys: order.iter().map(|&i| self.keys[i].clone()).collect(),
            values: order.iter().map(|&i| self.values[i].clone()).collect(),
            capacity: self.capacity,
        }
    }
}

impl<T: Shaped> MemoryBank<T> {
    pub fn append(&mut self, key: T, value: T) -> Result<()> {
        let (ks, vs) = (key.dims(), value.dims());
        if ks.len() != 3 || vs.len() != 3 || ks[1..] != vs[1..] {
            return Err(Error::shape(format!(
                "memory entry key {} and value {} must be [C×h×w] with equal h, w",
                fmt_shape(&ks),
                fmt_shape(&vs)
            )));
        }
        if let (Some(k0), Some(v0)) = (self.keys.first(), self.values.first()) {
            if k0.dims() != ks || v0.dims() != vs {
                return Err(Error::shape(format!(
                    "memory holds keys {} / values {}, got {} / {}",
                    fmt_shape(&k0.dims()),
                    fmt_shape(&v0.dims()),
                    fmt_shape(&ks),
                    fmt_shape(&vs)
                )));
            }
        }
        self.keys.push(key);
        self.values.push(value);
        if let Some(cap) = self.capacity {
            if self.keys.len() > cap {
                self.keys.remove(1);
                self.values.remove(1);
            }
        }
        Ok(())
    }
}

impl MemoryBank<Tensor> {
    /// Binds every entry to `tape` as a constant.
    pub fn lift<'t>(&self, tape: &'t Tape) -> MemoryBank<Var<'t>> {
        self.map(|t| tape.constant(t.clone()))
    }

    /// Keys stacked as `[T×Ck×h×w]`.
    pub fn stacked_keys(&self) -> Result<Tensor> {
        Tensor::stack(&self.keys)
    }

    /// Values stacked as `[T×Cv×h×w]`.
    pub fn stacked_values(&self) -> Result<Tensor> {
        Tensor::stack(&self.values)
    }
}

impl<'t> MemoryBank<Var<'t>> {
    pub fn detach(&self) -> MemoryBank<Tensor> {
        self.map(Var::value)
    }
}

fn flatten_entries<'t>(entries: &[Var<'t>]) -> Result<Var<'t>> {
    let flat = entries
        .iter()
        .map(|e| {
            let s = e.shape();
            e.reshape([s[0], s[1] * s[2]])
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&flat, 1)
}

/// Attention read of the current frame's key `[Ck×h×w]` against every stored
/// frame, returning `[Cv×h×w]`.
pub fn memory_read<'t>(bank: &MemoryBank<Var<'t>>, key: Var<'t>, cfg: AttentionConfig) -> Result<Var<'t>> {
    if bank.is_empty() {
        return Err(Error::State("memory_read on an empty memory bank".into()));
    }
    let ks = key.shape();
    let bs = bank.keys[0].shape();
    if ks.len() != 3 || ks[0] != bs[0] {
        return Err(Error::shape(format!(
            "query key {} does not match memory keys {}",
            fmt_shape(&ks),
            fmt_shape(&bs)
        )));
    }
    let keys = flatten_entries(&bank.keys)?;
    let values = flatten_entries(&bank.values)?;
    attend(key, keys, values, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn read(bank: &MemoryBank<Tensor>, key: &Tensor, cfg: AttentionConfig) -> Tensor {
        let tape = Tape::no_grad();
        memory_read(&bank.lift(&tape), tape.constant(key.clone()), cfg).unwrap().value()
    }

    #[test]
    fn append_orders_and_evicts() {
        let mut bank = MemoryBank::new(None);
        bank.append(Tensor::full([1, 1, 1], 1.0), Tensor::zeros([2, 1, 1])).unwrap();
        assert_eq!(bank.len(), 1);
        bank.append(Tensor::full([1, 1, 1], 2.0), Tensor::zeros([2, 1, 1])).unwrap();
        assert_eq!(bank.len(), 2);
        assert_eq!(bank.keys()[1].data(), &[2.0]);

        let mut capped = MemoryBank::new(Some(2));
        for i in 1..=3 {
            capped.append(Tensor::full([1, 1, 1], i as f64), Tensor::zeros([2, 1, 1])).unwrap();
        }
        let kept: Vec<f64> = capped.keys().iter().map(|k| k.data()[0]).collect();
        assert_eq!(kept, vec![1.0, 3.0]);
    }

    #[test]
    fn append_rejects_mismatched_entries() {
        let mut bank = MemoryBank::new(None);
        bank.append(Tensor::zeros([1, 2, 2]), Tensor::zeros([4, 2, 2])).unwrap();
        assert!(bank.append(Tensor::zeros([1, 3, 2]), Tensor::zeros([4, 3, 2])).is_err());
        assert!(bank.append(Tensor::zeros([2, 2, 2]), Tensor::zeros([4, 2, 2])).is_err());
        assert!(bank.append(Tensor::zeros([1, 2, 2]), Tensor::zeros([4, 2, 1])).is_err());
    }

    #[test]
    fn empty_bank_read_is_state_error() {
        let tape = Tape::no_grad();
        let bank = MemoryBank::<Var<'_>>::new(None);
        let err = memory_read(&bank, tape.constant(Tensor::zeros([1, 1, 1])), AttentionConfig::default());
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn identical_keys_give_mean_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bank = MemoryBank::new(None);
        let values = Tensor::uniform([3, 2, 2], -1.0, 1.0, &mut rng);
        bank.append(Tensor::full([2, 2, 2], 0.7), values.clone()).unwrap();
        let query = Tensor::uniform([2, 2, 2], -1.0, 1.0, &mut rng);
        let y = read(&bank, &query, AttentionConfig::default());
        for c in 0..3 {
            let mean: f64 = values.data()[c * 4..(c + 1) * 4].iter().sum::<f64>() / 4.0;
            for p in 0..4 {
                assert!((y.data()[c * 4 + p] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_values_read_back_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut bank = MemoryBank::new(None);
        for _ in 0..3 {
            bank.append(Tensor::uniform([2, 3, 3], -2.0, 2.0, &mut rng), Tensor::full([4, 3, 3], 0.25))
                .unwrap();
        }
        let y = read(&bank, &Tensor::uniform([2, 3, 3], -2.0, 2.0, &mut rng), AttentionConfig::default());
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn saturated_query_selects_matching_entry() {
        // Two single-position entries with orthogonal one-hot keys. The query
        // is entry 2's key scaled by 100, so its score is 100/sqrt(2) against
        // 0 and the softmax weight on entry 1 is exp(-70.7) ~ 2e-31.
        let mut bank = MemoryBank::new(None);
        bank.append(t(&[2, 1, 1], vec![1.0, 0.0]), t(&[3, 1, 1], vec![1.0, 2.0, 3.0])).unwrap();
        bank.append(t(&[2, 1, 1], vec![0.0, 1.0]), t(&[3, 1, 1], vec![-4.0, 5.0, 0.5])).unwrap();
        let y = read(&bank, &t(&[2, 1, 1], vec![0.0, 100.0]), AttentionConfig::default());
        for (a, b) in y.data().iter().zip([-4.0, 5.0, 0.5]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn double_exp_mode_stays_finite() {
        let mut bank = MemoryBank::new(None);
        bank.append(t(&[1, 1, 2], vec![1.0, -1.0]), t(&[1, 1, 2], vec![3.0, 7.0])).unwrap();
        let cfg = AttentionConfig {
            similarity: Similarity::DoubleExp,
            key_scaling: false,
        };
        let y = read(&bank, &t(&[1, 1, 1], vec![1000.0]), cfg);
        assert!(y.is_finite());
        assert!((y.data()[0] - 3.0).abs() < 1e-12);
        // Moderate scores: softmax(exp(s)) by hand for s = (0.5, -0.5).
        let y = read(&bank, &t(&[1, 1, 1], vec![0.5]), cfg);
        let (a, b) = (0.5f64.exp().exp(), (-0.5f64).exp().exp());
        let expect = (3.0 * a + 7.0 * b) / (a + b);
        assert!((y.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn stacked_layout_is_t_first() {
        let mut bank = MemoryBank::new(None);
        bank.append(Tensor::zeros([1, 2, 2]), Tensor::zeros([4, 2, 2])).unwrap();
        bank.append(Tensor::ones([1, 2, 2]), Tensor::ones([4, 2, 2])).unwrap();
        assert_eq!(bank.stacked_keys().unwrap().shape(), &[2, 1, 2, 2]);
        assert_eq!(bank.stacked_values().unwrap().shape(), &[2, 4, 2, 2]);
    }
}
