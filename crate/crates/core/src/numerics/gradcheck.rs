//! Central-difference gradient checking against hand-written VJPs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ops, Tensor};

/// Finite-difference step used in 64-bit mode.
pub const STEP: f64 = 1e-5;

/// An operation exposing a forward pass and a vector-Jacobian product over a
/// flattened input/parameter vector.
pub trait Differentiable {
    fn input_len(&self) -> usize;
    fn output_len(&self) -> usize;
    fn eval(&self, x: &[f64]) -> Vec<f64>;
    /// Pullback of `upstream` through the op at `x`.
    fn vjp(&self, x: &[f64], upstream: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub checked_coords: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Check every input coordinate.
pub fn grad_check(f: &dyn Differentiable, x: &[f64], seed: u64, tol: f64) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, seed, tol, &coords)
}

/// Check a random subset of coordinates; used for large composites where the
/// full sweep would be prohibitively slow.
pub fn grad_check_sampled(
    f: &dyn Differentiable,
    x: &[f64],
    seed: u64,
    tol: f64,
    max_coords: usize,
) -> Result<GradCheckReport> {
    let n = x.len();
    if n <= max_coords {
        return grad_check(f, x, seed, tol);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut picked = vec![false; n];
    let mut coords = Vec::with_capacity(max_coords);
    while coords.len() < max_coords {
        let i = rng.gen_range(0..n);
        if !picked[i] {
            picked[i] = true;
            coords.push(i);
        }
    }
    coords.sort_unstable();
    grad_check_coords(f, x, seed, tol, &coords)
}

fn grad_check_coords(
    f: &dyn Differentiable,
    x: &[f64],
    seed: u64,
    tol: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    assert_eq!(x.len(), f.input_len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let upstream: Vec<f64> = (0..f.output_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let analytic = f.vjp(x, &upstream);
    if analytic.len() != x.len() {
        return Err(Error::dimension("grad_check", "vjp length != input length"));
    }
    if analytic.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { stage: "grad_check analytic gradient" });
    }

    let project = |x: &[f64]| -> f64 {
        f.eval(x).iter().zip(&upstream).map(|(y, u)| y * u).sum()
    };

    let mut probe = x.to_vec();
    let mut max_rel = 0.0;
    let mut worst = 0;
    for &i in coords {
        let saved = probe[i];
        probe[i] = saved + STEP;
        let plus = project(&probe);
        probe[i] = saved - STEP;
        let minus = project(&probe);
        probe[i] = saved;
        let numeric = (plus - minus) / (2.0 * STEP);
        let rel = rel_error(analytic[i], numeric);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst_coord: worst,
        checked_coords: coords.len(),
        tol,
        passed: max_rel <= tol,
    })
}

/// Relative error with a unit floor, so near-zero gradients compare absolutely.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

// ---------------------------------------------------------------------------
// Harness adapters for the primitive ops.
// ---------------------------------------------------------------------------

/// Elementwise ELU over a vector of the given length.
pub struct EluFn(pub usize);

impl Differentiable for EluFn {
    fn input_len(&self) -> usize {
        self.0
    }
    fn output_len(&self) -> usize {
        self.0
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let t = Tensor::from_vec(&[self.0], x.to_vec()).unwrap();
        ops::elu(&t).into_data()
    }
    fn vjp(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let t = Tensor::from_vec(&[self.0], x.to_vec()).unwrap();
        let u = Tensor::from_vec(&[self.0], upstream.to_vec()).unwrap();
        ops::elu_vjp(&t, &u).unwrap().into_data()
    }
}

/// Pointwise convolution over `[h, w, cin]` with inputs packed `[x | w | b]`.
pub struct PointwiseConvFn {
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
}

impl PointwiseConvFn {
    fn split<'a>(&self, x: &'a [f64]) -> (Tensor, Tensor, Tensor, &'a [f64]) {
        let nx = self.height * self.width * self.cin;
        let nw = self.cin * self.cout;
        let xs = Tensor::from_vec(&[self.height, self.width, self.cin], x[..nx].to_vec()).unwrap();
        let ws = Tensor::from_vec(&[self.cin, self.cout], x[nx..nx + nw].to_vec()).unwrap();
        let bs = Tensor::from_vec(&[self.cout], x[nx + nw..].to_vec()).unwrap();
        (xs, ws, bs, x)
    }
}

impl Differentiable for PointwiseConvFn {
    fn input_len(&self) -> usize {
        self.height * self.width * self.cin + self.cin * self.cout + self.cout
    }
    fn output_len(&self) -> usize {
        self.height * self.width * self.cout
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let (xs, ws, bs, _) = self.split(x);
        ops::pointwise_conv(&xs, &ws, &bs).unwrap().into_data()
    }
    fn vjp(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let (xs, ws, _, _) = self.split(x);
        let u = Tensor::from_vec(&[self.height, self.width, self.cout], upstream.to_vec()).unwrap();
        let (dx, dw, db) = ops::pointwise_conv_vjp(&xs, &ws, &u).unwrap();
        let mut out = dx.into_data();
        out.extend(dw.into_data());
        out.extend(db.into_data());
        out
    }
}

/// Layer norm over `[pixels, channels]` with inputs packed `[x | gain | bias]`.
pub struct LayerNormFn {
    pub pixels: usize,
    pub channels: usize,
    pub eps: f64,
}

impl Differentiable for LayerNormFn {
    fn input_len(&self) -> usize {
        self.pixels * self.channels + 2 * self.channels
    }
    fn output_len(&self) -> usize {
        self.pixels * self.channels
    }
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let nx = self.pixels * self.channels;
        let xs = Tensor::from_vec(&[self.pixels, self.channels], x[..nx].to_vec()).unwrap();
        let g = Tensor::from_vec(&[self.channels], x[nx..nx + self.channels].to_vec()).unwrap();
        let b = Tensor::from_vec(&[self.channels], x[nx + self.channels..].to_vec()).unwrap();
        ops::layer_norm(&xs, &g, &b, self.eps).unwrap().into_data()
    }
    fn vjp(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let nx = self.pixels * self.channels;
        let xs = Tensor::from_vec(&[self.pixels, self.channels], x[..nx].to_vec()).unwrap();
        let g = Tensor::from_vec(&[self.channels], x[nx..nx + self.channels].to_vec()).unwrap();
        let u = Tensor::from_vec(&[self.pixels, self.channels], upstream.to_vec()).unwrap();
        let (dx, dg, db) = ops::layer_norm_vjp(&xs, &g, self.eps, &u).unwrap();
        let mut out = dx.into_data();
        out.extend(dg.into_data());
        out.extend(db.into_data());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn elu_gradient_at_half() {
        let f = EluFn(1);
        let report = grad_check(&f, &[0.5], 1, 1e-7).unwrap();
        assert!(report.passed, "rel error {}", report.max_rel_error);
    }

    #[test]
    fn pointwise_conv_gradient() {
        let f = PointwiseConvFn { height: 2, width: 3, cin: 3, cout: 2 };
        let x = random_vec(f.input_len(), 21);
        let report = grad_check(&f, &x, 2, 1e-7).unwrap();
        assert!(report.passed, "rel error {}", report.max_rel_error);
    }

    #[test]
    fn layer_norm_gradient() {
        let f = LayerNormFn { pixels: 4, channels: 5, eps: 1e-6 };
        let x = random_vec(f.input_len(), 33);
        let report = grad_check(&f, &x, 3, 1e-6).unwrap();
        assert!(report.passed, "rel error {}", report.max_rel_error);
    }

    #[test]
    fn primitive_ops_pass_at_ten_seeds() {
        for seed in 0..10u64 {
            let f = PointwiseConvFn { height: 2, width: 2, cin: 4, cout: 3 };
            let x = random_vec(f.input_len(), 100 + seed);
            assert!(grad_check(&f, &x, seed, 1e-5).unwrap().passed);

            let g = LayerNormFn { pixels: 3, channels: 4, eps: 1e-6 };
            let y = random_vec(g.input_len(), 200 + seed);
            assert!(grad_check(&g, &y, seed, 1e-5).unwrap().passed);

            let e = EluFn(16);
            let z = random_vec(16, 300 + seed);
            assert!(grad_check(&e, &z, seed, 1e-5).unwrap().passed);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        struct Bad;
        impl Differentiable for Bad {
            fn input_len(&self) -> usize {
                2
            }
            fn output_len(&self) -> usize {
                1
            }
            fn eval(&self, x: &[f64]) -> Vec<f64> {
                vec![x[0] * x[0] + x[1]]
            }
            fn vjp(&self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
                vec![upstream[0] * (2.0 * x[0] + 0.5), upstream[0]]
            }
        }
        let report = grad_check(&Bad, &[0.3, -0.2], 4, 1e-5).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn non_finite_analytic_gradient_is_a_hard_failure() {
        struct Nan;
        impl Differentiable for Nan {
            fn input_len(&self) -> usize {
                1
            }
            fn output_len(&self) -> usize {
                1
            }
            fn eval(&self, x: &[f64]) -> Vec<f64> {
                vec![x[0]]
            }
            fn vjp(&self, _x: &[f64], _upstream: &[f64]) -> Vec<f64> {
                vec![f64::NAN]
            }
        }
        assert!(grad_check(&Nan, &[1.0], 5, 1e-5).is_err());
    }
}
