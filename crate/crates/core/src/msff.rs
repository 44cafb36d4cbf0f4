//! Multi-scale feature fusion: per-branch channel weights from pooled
//! statistics, then a weighted sum of the temporal, spatial and encoder
//! features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{PoolMode, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Ctx, Linear, ParamStore};
use crate::tensor::fmt_shape;

/// Which global pooling statistics feed the weight heads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    Max,
    Avg,
    #[default]
    Both,
}

impl Pooling {
    fn modes(self) -> &'static [PoolMode] {
        match self {
            Pooling::Max => &[PoolMode::Max],
            Pooling::Avg => &[PoolMode::Avg],
            Pooling::Both => &[PoolMode::Avg, PoolMode::Max],
        }
    }
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "avg" => Ok(Self::Avg),
            "both" => Ok(Self::Both),
            other => Err(Error::validation(format!("unknown pooling {other:?} (expected max, avg or both)"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Max => "max",
            Pooling::Avg => "avg",
            Pooling::Both => "both",
        })
    }
}

/// `Linear(k·C′ → C′/r) → relu → Linear(C′/r → C′) → sigmoid`, where `k` is
/// the number of pooled statistics.
#[derive(Clone, Debug)]
pub struct FcHead {
    fc1: Linear,
    fc2: Linear,
    pooling: Pooling,
    channels: usize,
}

impl FcHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        pooling: Pooling,
        rng: &mut R,
    ) -> Self {
        let hidden = (channels / reduction.max(1)).max(1);
        let inputs = channels * pooling.modes().len();
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), inputs, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng),
            pooling,
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.fc1.out_features
    }
}

/// Per-channel weights in `(0, 1)` for a `[C′×h×w]` feature.
pub fn channel_weights<'t>(ctx: &Ctx<'t>, x: Var<'t>, head: &FcHead) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != head.channels {
        return Err(Error::shape(format!(
            "weight head for {} channels applied to {}",
            head.channels,
            fmt_shape(&shape)
        )));
    }
    let pooled = head
        .pooling
        .modes()
        .iter()
        .map(|&m| x.global_pool(m))
        .collect::<Result<Vec<_>>>()?;
    let stats = if pooled.len() == 1 { pooled[0] } else { Var::concat(&pooled, 0)? };
    let hidden = head.fc1.forward(ctx, stats)?.relu();
    Ok(head.fc2.forward(ctx, hidden)?.sigmoid())
}

/// `Σ weights_i ⊙ feature_i` with `[C]` weights broadcast over `[C×h×w]`.
pub fn weighted_sum<'t>(terms: &[(Var<'t>, Var<'t>)]) -> Result<Var<'t>> {
    let (first, rest) = terms.split_first().ok_or_else(|| Error::shape("fusion of zero branches"))?;
    let base = first.0.shape();
    let mut acc = first.0.mul(&first.1)?;
    for (feature, weights) in rest {
        if feature.shape() != base {
            return Err(Error::shape(format!(
                "fusion branches disagree: {} vs {}",
                fmt_shape(&base),
                fmt_shape(&feature.shape())
            )));
        }
        acc = acc.add(&feature.mul(weights)?)?;
    }
    Ok(acc)
}

/// Fine-grained (`y`, `z`) and coarse-grained (`w`) inputs to the fusion.
#[derive(Clone, Copy, Debug)]
pub struct BranchFeatures<'t> {
    /// Temporal read, `[C/2×h×w]`.
    pub y: Var<'t>,
    /// Spatial read, `[C/2×h×w]`; absent when the spatial branch is disabled.
    pub z: Option<Var<'t>>,
    /// Encoder tap projected to `[C/8×h×w]`.
    pub w: Var<'t>,
}

/// Weight heads for each branch and the `C/8 → C/2` lift of `w`.
#[derive(Clone, Debug)]
pub struct Msff {
    y_head: FcHead,
    z_head: Option<FcHead>,
    w_head: FcHead,
    w_lift: Conv2d,
}

impl Msff {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_channels: usize,
        reduction: usize,
        pooling: Pooling,
        with_spatial: bool,
        rng: &mut R,
    ) -> Self {
        let cv = feature_channels / 2;
        let ck = feature_channels / 8;
        Self {
            y_head: FcHead::new(store, "msff.y_head", cv, reduction, pooling, rng),
            z_head: with_spatial.then(|| FcHead::new(store, "msff.z_head", cv, reduction, pooling, rng)),
            w_head: FcHead::new(store, "msff.w_head", cv, reduction, pooling, rng),
            w_lift: Conv2d::new(store, "msff.w_lift", ck, cv, 1, 1, rng),
        }
    }

    /// Per-branch weights `(Y, Z, W′)` and the lifted `w′`.
    pub fn branch_weights<'t>(
        &self,
        ctx: &Ctx<'t>,
        b: &BranchFeatures<'t>,
    ) -> Result<(Var<'t>, Option<Var<'t>>, Var<'t>, Var<'t>)> {
        let (ys, ws) = (b.y.shape(), b.w.shape());
        if ys.len() != 3 || ws.len() != 3 || ys[1..] != ws[1..] || b.z.is_some_and(|z| z.shape() != ys) {
            return Err(Error::shape(format!(
                "fusion inputs disagree spatially: y {}, z {}, w {}",
                fmt_shape(&ys),
                b.z.map(|z| fmt_shape(&z.shape())).unwrap_or_else(|| "-".into()),
                fmt_shape(&ws)
            )));
        }
        let w_lifted = self.w_lift.forward(ctx, b.w)?;
        let y_weights = channel_weights(ctx, b.y, &self.y_head)?;
        let z_weights = match (b.z, &self.z_head) {
            (Some(z), Some(head)) => Some(channel_weights(ctx, z, head)?),
            (None, None) => None,
            _ => return Err(Error::State("spatial branch presence does not match the fusion heads".into())),
        };
        let w_weights = channel_weights(ctx, w_lifted, &self.w_head)?;
        Ok((y_weights, z_weights, w_weights, w_lifted))
    }

    /// `X = Y⊙y + Z⊙z + W′⊙w′`.
    pub fn fuse<'t>(&self, ctx: &Ctx<'t>, b: &BranchFeatures<'t>) -> Result<Var<'t>> {
        let (yw, zw, ww, w_lifted) = self.branch_weights(ctx, b)?;
        let mut terms = vec![(b.y, yw)];
        if let (Some(z), Some(zw)) = (b.z, zw) {
            terms.push((z, zw));
        }
        terms.push((w_lifted, ww));
        weighted_sum(&terms)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(channels: usize, pooling: Pooling, seed: u64) -> (ParamStore, FcHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = FcHead::new(&mut store, "h", channels, 4, pooling, &mut rng);
        (store, h)
    }

    #[test]
    fn zero_head_gives_half() {
        let (mut store, h) = head(8, Pooling::Both, 0);
        store.zero_where(|_| true);
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        let w = channel_weights(&ctx, tape.constant(Tensor::zeros([8, 3, 3])), &h).unwrap().value();
        assert!(w.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn head_rejects_wrong_channel_count() {
        let (store, h) = head(8, Pooling::Both, 0);
        let tape = Tape::no_grad();
        let ctx = Ctx::new(&tape, &store);
        assert!(channel_weights(&ctx, tape.constant(Tensor::zeros([4, 2, 2])), &h).is_err());
    }

    #[test]
    fn single_statistic_heads_have_narrow_input() {
        let (store, h) = head(8, Pooling::Max, 0);
        assert_eq!(store.get(store.id_of("h.fc1.weight").unwrap()).shape(), &[2, 8]);
        assert_eq!(h.hidden(), 2);
    }

    #[test]
    fn weighted_sum_rejects_mismatch() {
        let tape = Tape::no_grad();
        let a = tape.constant(Tensor::zeros([2, 2, 2]));
        let b = tape.constant(Tensor::zeros([2, 3, 2]));
        let w = tape.constant(Tensor::ones([2]));
        assert!(weighted_sum(&[(a, w), (b, w)]).is_err());
    }
}
