//! Finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Result of comparing analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, flat element, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coordinates_checked: usize,
    /// Coordinates re-measured with a smaller step.
    pub coordinates_refined: usize,
}

/// Which coordinates to perturb.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many randomly chosen elements per input.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
    /// Denominator floor of the relative error. Gradients below it are in
    /// effect compared in absolute terms.
    pub floor: f64,
    /// When set, a coordinate whose error exceeds this value is re-measured
    /// with three-point steps `eps/3` down to `eps/100` and then a five-point
    /// step `10·eps`, keeping the best agreement. Smaller steps fix a step that straddles a ReLU or max-pool
    /// switch, the larger one fixes rounding noise on tiny entries. A wrong
    /// gradient does not agree at any step.
    pub refine_above: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_coords_per_input: None,
            seed: 0,
            floor: 1e-8,
            refine_above: None,
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_floor(analytic, numeric, 1e-8)
}

fn relative_error_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::no_grad();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?.value();
    if out.numel() != 1 {
        return Err(Error::shape("grad_check function must return a scalar"));
    }
    let v = out.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function returned {v}")));
    }
    Ok(v)
}

/// Checks the gradient of a scalar function of several tensors.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(Error::validation(format!("eps {} outside [1e-7, 1e-3]", opts.eps)));
    }
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    if !out.value().item().is_finite() {
        return Err(Error::NonFinite(format!("function returned {}", out.value().item())));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt_or_zeros(*v)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates_checked: 0,
        coordinates_refined: 0,
    };
    let mut perturbed = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(limit) if limit < n => {
                let mut c = sample(&mut rng, n, limit).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            // Five-point stencil, truncation error O(eps^4); the three-point
            // one reaches only one step away from the point.
            let mut central = |eps: f64, five_point: bool| -> Result<f64> {
                let mut at = |delta: f64| -> Result<f64> {
                    let mut data = input.to_vec();
                    data[idx] = input.data()[idx] + delta;
                    perturbed[which] = Tensor::new(input.shape().to_vec(), data)?;
                    evaluate(&f, &perturbed)
                };
                let (p1, m1) = (at(eps)?, at(-eps)?);
                if !five_point {
                    return Ok((p1 - m1) / (2.0 * eps));
                }
                let (p2, m2) = (at(2.0 * eps)?, at(-2.0 * eps)?);
                Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps))
            };
            let a = analytic[which].data()[idx];
            let mut numeric = central(opts.eps, true)?;
            let mut err = relative_error_floor(a, numeric, opts.floor);
            if let Some(limit) = opts.refine_above.filter(|&l| err > l) {
                report.coordinates_refined += 1;
                for (eps, five_point) in [(3.0, false), (10.0, false), (30.0, false), (100.0, false), (0.1, true)]
                    .map(|(d, fp)| (opts.eps / d, fp))
                {
                    let n = central(eps, five_point)?;
                    let e = relative_error_floor(a, n, opts.floor);
                    if e < err {
                        (numeric, err) = (n, e);
                    }
                    if err <= limit {
                        break;
                    }
                }
            }
            report.coordinates_checked += 1;
            if report.worst.is_none() || err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((which, idx, a, numeric));
            }
        }
        perturbed[which] = input.clone();
    }
    Ok(report)
}

/// Max relative error between the reverse-mode gradient of `f` at `x` and
/// central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let opts = GradCheckOptions {
        eps,
        ..GradCheckOptions::default()
    };
    grad_check_many(|_, v| f(v[0]), std::slice::from_ref(x), opts).map(|r| r.max_relative_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new([3], vec![0.3, -1.2, 4.0]).unwrap();
        let err = grad_check(|v| Ok(v.sum()), &x, 1e-4).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn square_sum_gradient() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let loss = v.mul(&v).unwrap().sum();
        assert_eq!(tape.backward(loss).unwrap().wrt(v).unwrap().data(), &[2.0, 4.0]);
        let err = grad_check(|v| Ok(v.mul(&v)?.sum()), &x, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn eps_out_of_range() {
        let x = Tensor::ones([1]);
        assert!(matches!(grad_check(|v| Ok(v.sum()), &x, 1e-2), Err(Error::Validation(_))));
    }

    #[test]
    fn non_finite_output_is_reported() {
        let x = Tensor::full([1], 1000.0);
        let r = grad_check(|v| Ok(v.exp().sum()), &x, 1e-6);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // clamp_max has zero gradient above the limit while the numeric
        // derivative straddling the kink is 1/2.
        let x = Tensor::full([1], 2.0);
        let err = grad_check(|v| Ok(v.clamp_max(2.0).sum()), &x, 1e-6).unwrap();
        assert!(err > 0.4);
    }
}
