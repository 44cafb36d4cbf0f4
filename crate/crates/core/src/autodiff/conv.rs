//! Spatial operations on `[C×H×W]` feature maps.

use super::gemm::gemm;
use super::Var;
use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

fn chw(x: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!("{op} needs a [C×H×W] input, got {}", fmt_shape(x.shape())))),
    }
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds `x` into `[c_in·k·k, h_out·w_out]` columns.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let &ConvGeom { c_in, h, w, k, stride, pad, h_out, w_out } = self;
        let n_out = h_out * w_out;
        let mut cols = vec![0.0; c_in * k * k * n_out];
        for c in 0..c_in {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * n_out..][..n_out];
                    for oy in 0..h_out {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..][..w];
                        let dst = &mut row[oy * w_out..][..w_out];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col).
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let &ConvGeom { c_in, h, w, k, stride, pad, h_out, w_out } = self;
        let n_out = h_out * w_out;
        let mut x = vec![0.0; c_in * h * w];
        for c in 0..c_in {
            let plane = &mut x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * n_out..][..n_out];
                    for oy in 0..h_out {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..w_out {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[oy * w_out + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation of a `[C_in×H×W]` input with `[C_out×C_in×k×k]`
    /// weights and a `[C_out]` bias.
    pub fn conv2d(&self, weight: &Var<'t>, bias: &Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let x = self.value();
        let wt = weight.value();
        let b = bias.value();
        let (c_in, h, w) = chw(&x, "conv2d")?;
        let &[c_out, wc_in, k, k2] = wt.shape() else {
            return Err(Error::shape(format!("conv2d weight must be rank 4, got {}", fmt_shape(wt.shape()))));
        };
        if wc_in != c_in || k != k2 || b.shape() != [c_out] {
            return Err(Error::shape(format!(
                "conv2d: input {}, weight {}, bias {} are inconsistent",
                fmt_shape(x.shape()),
                fmt_shape(wt.shape()),
                fmt_shape(b.shape())
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be at least 1"));
        }
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::shape(format!(
                "conv2d kernel {k}x{k} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let geom = ConvGeom {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        };
        let n_out = geom.h_out * geom.w_out;
        let patch = c_in * k * k;
        let cols = if geom.is_pointwise() { x.to_vec() } else { geom.im2col(x.data()) };
        let mut out = vec![0.0; c_out * n_out];
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * n_out..(o + 1) * n_out].fill(bv);
        }
        gemm(false, false, c_out, patch, n_out, wt.data(), &cols, 1.0, &mut out);
        let y = Tensor::from_parts(vec![c_out, geom.h_out, geom.w_out], out);
        Ok(self.tape.record(y, &[*self, *weight, *bias], move || {
            Box::new(move |g, needs| {
                let dx = needs[0].then(|| {
                    let mut dcols = vec![0.0; patch * n_out];
                    gemm(true, false, patch, c_out, n_out, wt.data(), g, 0.0, &mut dcols);
                    if geom.is_pointwise() {
                        dcols
                    } else {
                        geom.col2im(&dcols)
                    }
                });
                let dw = needs[1].then(|| {
                    let mut dw = vec![0.0; c_out * patch];
                    gemm(false, true, c_out, n_out, patch, g, &cols, 0.0, &mut dw);
                    dw
                });
                let db = needs[2].then(|| g.chunks_exact(n_out).map(|row| row.iter().sum()).collect());
                vec![dx, dw, db]
            })
        }))
    }

    /// Global pooling of each channel to a single value, giving `[C]`. Max
    /// pooling routes the gradient to the first maximal element in row-major
    /// order; average pooling spreads it as `1/(H·W)`.
    pub fn global_pool(&self, mode: PoolMode) -> Result<Var<'t>> {
        let x = self.value();
        let (c, h, w) = chw(&x, "global_pool")?;
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("global_pool over an empty spatial extent"));
        }
        let planes = x.data().chunks_exact(hw);
        let (values, argmax): (Vec<f64>, Vec<usize>) = match mode {
            PoolMode::Avg => planes.map(|p| (p.iter().sum::<f64>() / hw as f64, 0)).unzip(),
            PoolMode::Max => planes
                .map(|p| {
                    let mut best = 0;
                    for (i, &v) in p.iter().enumerate() {
                        if v > p[best] {
                            best = i;
                        }
                    }
                    (p[best], best)
                })
                .unzip(),
        };
        let y = Tensor::from_parts(vec![c], values);
        Ok(self.tape.record(y, &[*self], move || {
            Box::new(move |g, _| {
                let mut dx = vec![0.0; c * hw];
                for (ch, &gv) in g.iter().enumerate() {
                    match mode {
                        PoolMode::Avg => dx[ch * hw..(ch + 1) * hw].fill(gv / hw as f64),
                        PoolMode::Max => dx[ch * hw + argmax[ch]] = gv,
                    }
                }
                vec![Some(dx)]
            })
        }))
    }

    /// Non-overlapping `window×window` average pooling.
    pub fn avg_pool(&self, window: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (c, h, w) = chw(&x, "avg_pool")?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(format!("avg_pool window {window} does not tile {h}x{w}")));
        }
        if window == 1 {
            return Ok(*self);
        }
        let (ho, wo) = (h / window, w / window);
        let norm = 1.0 / (window * window) as f64;
        let src = x.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * ho + y / window) * wo + xx / window] += src[(ch * h + y) * w + xx] * norm;
                }
            }
        }
        let y = Tensor::from_parts(vec![c, ho, wo], out);
        Ok(self.tape.record(y, &[*self], move || {
            Box::new(move |g, _| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[(ch * h + y) * w + xx] = g[(ch * ho + y / window) * wo + xx / window] * norm;
                        }
                    }
                }
                vec![Some(dx)]
            })
        }))
    }

    /// 2× nearest-neighbour upsampling.
    pub fn upsample_nearest2x(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (c, h, w) = chw(&x, "upsample_nearest2x")?;
        let (ho, wo) = (2 * h, 2 * w);
        let src = x.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(ch * ho + y) * wo + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let y = Tensor::from_parts(vec![c, ho, wo], out);
        Ok(self.tape.record(y, &[*self], move || {
            Box::new(move |g, _| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * ho + y) * wo + xx];
                        }
                    }
                }
                vec![Some(dx)]
            })
        }))
    }

    /// 2× bilinear upsampling with half-pixel centres and edge clamping.
    pub fn upsample_bilinear2x(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (c, h, w) = chw(&x, "upsample_bilinear2x")?;
        let rows = bilinear_taps(h);
        let cols = bilinear_taps(w);
        let (ho, wo) = (2 * h, 2 * w);
        let src = x.data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let plane = &src[ch * h * w..][..h * w];
            for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                    let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                    let bottom = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                    out[(ch * ho + oy) * wo + ox] = top * (1.0 - ly) + bottom * ly;
                }
            }
        }
        let y = Tensor::from_parts(vec![c, ho, wo], out);
        Ok(self.tape.record(y, &[*self], move || {
            Box::new(move |g, _| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let plane = &mut dx[ch * h * w..][..h * w];
                    for (oy, &(y0, y1, ly)) in rows.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in cols.iter().enumerate() {
                            let gv = g[(ch * ho + oy) * wo + ox];
                            plane[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                            plane[y0 * w + x1] += gv * (1.0 - ly) * lx;
                            plane[y1 * w + x0] += gv * ly * (1.0 - lx);
                            plane[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                vec![Some(dx)]
            })
        }))
    }
}

/// Source indices and interpolation weight of each output coordinate of a 2×
/// upsample along an axis of length `n`.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn conv(x: Tensor, w: Tensor, b: Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let (x, w, b) = (tape.constant(x), tape.constant(w), tape.constant(b));
        x.conv2d(&w, &b, stride, pad).map(|v| v.value())
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::new([1, 2, 3], vec![1., -2., 3., 4., 5., -6.]).unwrap();
        let y = conv(x.clone(), Tensor::ones([1, 1, 1, 1]), Tensor::zeros([1]), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_window_sums_to_nine() {
        let y = conv(Tensor::ones([1, 3, 3]), Tensor::ones([1, 1, 3, 3]), Tensor::zeros([1]), 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let x = Tensor::new([1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let y = conv(x, Tensor::zeros([2, 1, 3, 3]), Tensor::new([2], vec![0.5, -1.5]).unwrap(), 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5, -1.5, -1.5, -1.5, -1.5]);
    }

    #[test]
    fn output_size_formula() {
        let y = conv(Tensor::ones([1, 7, 5]), Tensor::ones([1, 1, 3, 3]), Tensor::zeros([1]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, (7 + 2 - 3) / 2 + 1, (5 + 2 - 3) / 2 + 1]);
    }

    #[test]
    fn oversized_kernel_is_a_dimension_error() {
        let err = conv(Tensor::ones([1, 2, 2]), Tensor::ones([1, 1, 3, 3]), Tensor::zeros([1]), 1, 0);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn pooling_examples() {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::new([2, 2, 2], vec![1., 2., 3., 4., 7., 7., 7., 7.]).unwrap());
        let max = x.global_pool(PoolMode::Max).unwrap().value();
        let avg = x.global_pool(PoolMode::Avg).unwrap().value();
        assert_eq!(max.data(), &[4.0, 7.0]);
        assert_eq!(avg.data(), &[2.5, 7.0]);
        let single = tape.constant(Tensor::new([1, 1, 1], vec![-3.0]).unwrap());
        assert_eq!(single.global_pool(PoolMode::Max).unwrap().value().data(), &[-3.0]);
        assert_eq!(single.global_pool(PoolMode::Avg).unwrap().value().data(), &[-3.0]);
    }

    #[test]
    fn max_pool_gradient_goes_to_first_tie() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([1, 2, 2], vec![1., 5., 5., 0.]).unwrap());
        let grads = tape.backward(x.global_pool(PoolMode::Max).unwrap().sum()).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn bilinear_preserves_constants_and_matches_reference() {
        let tape = Tape::no_grad();
        let c = tape.constant(Tensor::full([1, 3, 3], 2.5));
        assert!(c.upsample_bilinear2x().unwrap().value().data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
        // Half-pixel-centre reference for a 1×2 ramp [0, 1]:
        // outputs at x = -0.25 (clamped 0), 0.25, 0.75, 1.25 (clamped 1).
        let r = tape.constant(Tensor::new([1, 1, 2], vec![0., 1.]).unwrap());
        let up = r.upsample_bilinear2x().unwrap().value();
        assert_eq!(up.shape(), &[1, 2, 4]);
        assert_eq!(&up.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn nearest_upsample_repeats() {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::new([1, 1, 2], vec![1., 2.]).unwrap());
        let up = x.upsample_nearest2x().unwrap().value();
        assert_eq!(up.data(), &[1., 1., 2., 2., 1., 1., 2., 2.]);
    }

    #[test]
    fn avg_pool_window() {
        let tape = Tape::no_grad();
        let x = tape.constant(Tensor::new([1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        assert_eq!(x.avg_pool(2).unwrap().value().data(), &[2.5]);
        assert!(x.avg_pool(3).is_err());
    }
}
