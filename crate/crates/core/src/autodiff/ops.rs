use super::gemm::gemm;
use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, numel, Tensor};

/// Number of trailing elements each entry of `small` is repeated over when
/// broadcast against `big`. `small` must equal a leading prefix of `big`
/// after its trailing singleton axes are stripped.
fn broadcast_inner(big: &[usize], small: &[usize]) -> Option<usize> {
    let mut stripped = small;
    while let [rest @ .., 1] = stripped {
        stripped = rest;
    }
    if stripped.len() > big.len() || stripped != &big[..stripped.len()] {
        return None;
    }
    Some(numel(&big[stripped.len()..]))
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    fn unary(
        &self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let out = y.clone();
        self.tape.record(y, &[*self], move || {
            Box::new(move |g, _| {
                let dx = g
                    .iter()
                    .zip(x.data())
                    .zip(out.data())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(dx)]
            })
        })
    }

    fn binary(&self, other: &Var<'t>, op: Binary) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        if a.shape() == b.shape() {
            let y = a.zip_map(&b, |x, y| op.apply(x, y))?;
            return Ok(self.tape.record(y, &[*self, *other], move || {
                Box::new(move |g, needs| {
                    let da = needs[0].then(|| match op {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().zip(b.data()).map(|(g, b)| g * b).collect(),
                    });
                    let db = needs[1].then(|| match op {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|g| -g).collect(),
                        Binary::Mul => g.iter().zip(a.data()).map(|(g, a)| g * a).collect(),
                    });
                    vec![da, db]
                })
            }));
        }
        // One operand broadcasts over the trailing axes of the other.
        let (big_is_a, inner) = if let Some(inner) = broadcast_inner(a.shape(), b.shape()) {
            (true, inner)
        } else if let Some(inner) = broadcast_inner(b.shape(), a.shape()) {
            (false, inner)
        } else {
            return Err(Error::shape(format!(
                "cannot broadcast {} against {}",
                fmt_shape(a.shape()),
                fmt_shape(b.shape())
            )));
        };
        let (big, small) = if big_is_a { (&a, &b) } else { (&b, &a) };
        let data: Vec<f64> = big
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let s = small.data()[i / inner];
                if big_is_a {
                    op.apply(v, s)
                } else {
                    op.apply(s, v)
                }
            })
            .collect();
        let y = Tensor::from_parts(big.shape().to_vec(), data);
        Ok(self.tape.record(y, &[*self, *other], move || {
            Box::new(move |g, needs| {
                let (big, small) = if big_is_a { (&a, &b) } else { (&b, &a) };
                // d/d(big) and d/d(small) of op(a, b), before sign/order fixups.
                let sign_small = match (op, big_is_a) {
                    (Binary::Sub, true) => -1.0,
                    _ => 1.0,
                };
                let sign_big = match (op, big_is_a) {
                    (Binary::Sub, false) => -1.0,
                    _ => 1.0,
                };
                let need_big = if big_is_a { needs[0] } else { needs[1] };
                let need_small = if big_is_a { needs[1] } else { needs[0] };
                let d_big = need_big.then(|| match op {
                    Binary::Add | Binary::Sub => g.iter().map(|g| sign_big * g).collect(),
                    Binary::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(i, g)| g * small.data()[i / inner])
                        .collect(),
                });
                let d_small = need_small.then(|| {
                    let mut acc = vec![0.0; small.numel()];
                    for (i, gv) in g.iter().enumerate() {
                        acc[i / inner] += match op {
                            Binary::Add | Binary::Sub => sign_small * gv,
                            Binary::Mul => gv * big.data()[i],
                        };
                    }
                    acc
                });
                if big_is_a {
                    vec![d_big, d_small]
                } else {
                    vec![d_small, d_big]
                }
            })
        }))
    }

    /// Elementwise sum; `other` may broadcast over trailing singleton axes
    /// (or vice versa).
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub)
    }

    /// Elementwise product with the same broadcasting rule as [`add`](Self::add).
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul)
    }

    pub fn scale(&self, factor: f64) -> Var<'t> {
        self.unary(move |x| x * factor, move |_, _| factor)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid_scalar, |_, y| y * (1.0 - y))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    /// `min(x, limit)`; the gradient is zero where the clamp is active.
    pub fn clamp_max(&self, limit: f64) -> Var<'t> {
        self.unary(move |x| x.min(limit), move |x, _| if x < limit { 1.0 } else { 0.0 })
    }

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let n = x.numel();
        self.tape.record(Tensor::scalar(x.sum()), &[*self], move || {
            Box::new(move |g, _| vec![Some(vec![g[0]; n])])
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let y = self.value().reshape(shape)?;
        Ok(self.tape.record(y, &[*self], || Box::new(|g, _| vec![Some(g.to_vec())])))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        let &[m, n] = x.shape() else {
            return Err(Error::shape(format!("transpose needs rank 2, got {}", fmt_shape(x.shape()))));
        };
        let src = x.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let y = Tensor::from_parts(vec![n, m], data);
        Ok(self.tape.record(y, &[*self], move || {
            Box::new(move |g, _| {
                let mut dx = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(Error::shape(format!(
                "matmul needs rank-2 operands, got {} and {}",
                fmt_shape(a.shape()),
                fmt_shape(b.shape())
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions disagree: {} and {}",
                fmt_shape(a.shape()),
                fmt_shape(b.shape())
            )));
        }
        let mut c = vec![0.0; m * n];
        gemm(false, false, m, k, n, a.data(), b.data(), 0.0, &mut c);
        let y = Tensor::from_parts(vec![m, n], c);
        Ok(self.tape.record(y, &[*self, *other], move || {
            Box::new(move |g, needs| {
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let da = needs[0].then(|| {
                    let mut da = vec![0.0; m * k];
                    gemm(false, true, m, n, k, g, b.data(), 0.0, &mut da);
                    da
                });
                let db = needs[1].then(|| {
                    let mut db = vec![0.0; k * n];
                    gemm(true, false, k, m, n, a.data(), g, 0.0, &mut db);
                    db
                });
                vec![da, db]
            })
        }))
    }

    /// Row-wise softmax of a rank-2 tensor, stabilized by subtracting each
    /// row's maximum.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        let &[m, n] = x.shape() else {
            return Err(Error::shape(format!("softmax_rows needs rank 2, got {}", fmt_shape(x.shape()))));
        };
        if n == 0 {
            return Err(Error::shape("softmax_rows over an empty row dimension"));
        }
        let mut data = vec![0.0; m * n];
        for (row_in, row_out) in x.data().chunks_exact(n).zip(data.chunks_exact_mut(n)) {
            let max = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                total += *o;
            }
            row_out.iter_mut().for_each(|o| *o /= total);
        }
        let y = Tensor::from_parts(vec![m, n], data);
        let out = y.clone();
        Ok(self.tape.record(y, &[*self], move || {
            Box::new(move |g, _| {
                let mut dx = vec![0.0; m * n];
                for ((gr, yr), dr) in g
                    .chunks_exact(n)
                    .zip(out.data().chunks_exact(n))
                    .zip(dx.chunks_exact_mut(n))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                    for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = y * (g - dot);
                    }
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {}", fmt_shape(&base))));
        }
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {} vs {}",
                    fmt_shape(&base),
                    fmt_shape(s)
                )));
            }
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let widths: Vec<usize> = values.iter().map(|v| v.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
        let y = Tensor::from_parts(shape, data);
        Ok(first.tape.record(y, parts, move || {
            Box::new(move |g, needs| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(needs)
                    .map(|(&w, &need)| {
                        let start = offset;
                        offset += w;
                        need.then(|| {
                            let mut d = Vec::with_capacity(outer * w);
                            for o in 0..outer {
                                let row = o * total + start;
                                d.extend_from_slice(&g[row..row + w]);
                            }
                            d
                        })
                    })
                    .collect()
            })
        }))
    }

    /// Fully connected layer `weight · x + bias` for a vector `x` of length
    /// `in`, `weight: [out×in]`, `bias: [out]`.
    pub fn linear(&self, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let &[out_dim, in_dim] = w.shape() else {
            return Err(Error::shape(format!("linear weight must be rank 2, got {}", fmt_shape(w.shape()))));
        };
        if x.shape() != [in_dim] || b.shape() != [out_dim] {
            return Err(Error::shape(format!(
                "linear: input {} / bias {} incompatible with weight {}",
                fmt_shape(x.shape()),
                fmt_shape(b.shape()),
                fmt_shape(w.shape())
            )));
        }
        let mut y = b.to_vec();
        gemm(false, false, out_dim, in_dim, 1, w.data(), x.data(), 1.0, &mut y);
        let y = Tensor::from_parts(vec![out_dim], y);
        Ok(self.tape.record(y, &[*self, *weight, *bias], move || {
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dx = vec![0.0; in_dim];
                    gemm(true, false, in_dim, out_dim, 1, w.data(), g, 0.0, &mut dx);
                    dx
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; out_dim * in_dim];
                    gemm(false, false, out_dim, 1, in_dim, g, x.data(), 0.0, &mut dw);
                    dw
                });
                let db = needs[2].then(|| g.to_vec());
                vec![dx, dw, db]
            })
        }))
    }

    /// Mean binary cross-entropy of probabilities against a `{0,1}` target.
    /// Probabilities are clamped to `[eps, 1 - eps]`; the gradient is zero
    /// where the clamp is active.
    pub fn bce(&self, target: &Tensor, eps: f64) -> Result<Var<'t>> {
        let p = self.value();
        if p.shape() != target.shape() {
            return Err(Error::shape(format!(
                "bce: prediction {} vs target {}",
                fmt_shape(p.shape()),
                fmt_shape(target.shape())
            )));
        }
        let n = p.numel() as f64;
        let loss: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &g)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let target = target.clone();
        Ok(self.tape.record(Tensor::scalar(loss), &[*self], move || {
            Box::new(move |g, _| {
                let dp = p
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&p, &t)| {
                        if p <= eps || p >= 1.0 - eps {
                            0.0
                        } else {
                            g[0] * (-t / p + (1.0 - t) / (1.0 - p)) / n
                        }
                    })
                    .collect();
                vec![Some(dp)]
            })
        }))
    }
}
