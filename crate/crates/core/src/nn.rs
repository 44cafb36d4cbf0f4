//! Named parameters and the layers built on them.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(self.values[id.0].shape(), value.shape(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = value;
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids().filter(|id| self.names[id.0].starts_with(prefix)).collect()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    /// Overwrites every parameter whose name satisfies `pred` with zeros.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            if pred(name) {
                *value = Tensor::zeros(value.shape().to_vec());
            }
        }
    }
}

/// Parameters bound to a tape for one forward pass.
pub struct Ctx<'t> {
    tape: &'t Tape,
    params: Vec<Var<'t>>,
}

impl<'t> Ctx<'t> {
    /// Binds every parameter as a differentiable leaf (a constant on a
    /// no-grad tape).
    pub fn new(tape: &'t Tape, store: &ParamStore) -> Self {
        let params = store.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Self { tape, params }
    }

    /// Binds every parameter as a constant.
    pub fn frozen(tape: &'t Tape, store: &ParamStore) -> Self {
        let params = store.values.iter().map(|v| tape.constant(v.clone())).collect();
        Self { tape, params }
    }

    /// Binds `vars` in place of the parameters `ids`; everything else is a
    /// constant. Used to differentiate with respect to a parameter subset.
    pub fn bind(tape: &'t Tape, store: &ParamStore, ids: &[ParamId], vars: &[Var<'t>]) -> Self {
        assert_eq!(ids.len(), vars.len());
        let mut ctx = Self::frozen(tape, store);
        for (id, var) in ids.iter().zip(vars) {
            assert_eq!(var.shape(), store.get(*id).shape());
            ctx.params[id.0] = *var;
        }
        ctx
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.params[id.0]
    }

    pub fn constant(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    /// Parameter gradients in store order, zeros where disconnected.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params.iter().map(|p| grads.wrt_or_zeros(*p)).collect()
    }
}

/// Samples from `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let receptive = kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(&shape, in_channels * receptive, out_channels * receptive, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(&ctx.param(self.weight), &ctx.param(self.bias), self.stride, self.pad)
    }

    pub fn num_scalars(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(&[out_features, in_features], in_features, out_features, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_features]));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(&ctx.param(self.weight), &ctx.param(self.bias))
    }
}
