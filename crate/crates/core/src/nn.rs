//! Dense and dilated-convolution layers with explicit backward passes.
//!
//! Activations are laid out as `(S*T) x C` matrices: `S` sequences of `T`
//! steps stacked row-wise, so per-timestep layers are a single GEMM and
//! convolutions are an im2col GEMM that never mixes neighbouring sequences.
//!
//! Layers are generic over [`Scalar`]: `f32` for training throughput, `f64`
//! for gradient checking.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::Rng;

use crate::rng::Stream;

/// Floating-point element type of a network.
pub trait Scalar:
    LinalgScalar + ScalarOperand + Float + AddAssign + SubAssign + MulAssign + Debug + Default + Send + Sync + 'static
{
    const NAME: &'static str;
    fn cast(v: f64) -> Self;
    fn widen(self) -> f64;
    /// Writes GELU and its derivative at each element of `src`.
    fn gelu_kernel(src: &[Self], value: &mut [Self], grad: &mut [Self]);
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    fn cast(v: f64) -> Self {
        v as f32
    }
    fn widen(self) -> f64 {
        self as f64
    }
    fn gelu_kernel(src: &[Self], value: &mut [Self], grad: &mut [Self]) {
        gelu_kernel_f32(src, value, grad)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    fn cast(v: f64) -> Self {
        v
    }
    fn widen(self) -> f64 {
        self
    }
    fn gelu_kernel(src: &[Self], value: &mut [Self], grad: &mut [Self]) {
        gelu_kernel_f64(src, value, grad)
    }
}

/// `exp(x)` for `f32` via `2^n * p(r)` with `|r| <= ln2 / 2` and a degree-6
/// polynomial; relative error within a few ulps over the clamped range.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    let x = x.max(-87.0).min(88.0);
    // Round to nearest via the 1.5 * 2^23 trick; `f32::round` is a libm call
    // on baseline x86-64 and would block vectorisation.
    const MAGIC: f32 = 12_582_912.0;
    let n = (x * std::f32::consts::LOG2_E + MAGIC) - MAGIC;
    // Two-part ln2 keeps the reduction exact.
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let p = 1.0
        + r * (1.0 + r * (0.5 + r * (0.166_666_67 + r * (0.041_666_668 + r * (0.008_333_334 + r * 0.001_388_888_9)))));
    let bits = ((n as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

/// Uniform fan-in initialisation bound, `1 / sqrt(fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Draws in `f64` and casts, so both precisions start from the same values.
fn uniform<F: Scalar>(rows: usize, cols: usize, bound: f64, rng: &mut Stream) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || F::cast(rng.random_range(-bound..=bound)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F = f64> {
    /// `in x out`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn new(input: usize, output: usize, rng: &mut Stream) -> Self {
        Dense {
            weight: uniform(input, output, init_bound(input), rng),
            bias: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Dense<F>) -> Array2<F> {
        self.backward_params(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    /// Like [`Dense::backward`] but skips the input gradient.
    pub fn backward_params(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Dense<F>) {
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }
}

/// 1-D convolution over time with symmetric zero padding, so output length
/// equals input length. Tap `j` of output step `t` reads input step
/// `t + (j - (kernel - 1) / 2) * dilation`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d<F = f64> {
    /// `(kernel * in) x out`; row `j * in + c` is tap `j`, input channel `c`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub kernel: usize,
    pub dilation: usize,
}

impl<F: Scalar> Conv1d<F> {
    pub fn new(input: usize, output: usize, kernel: usize, dilation: usize, rng: &mut Stream) -> Self {
        Conv1d {
            weight: uniform(kernel * input, output, init_bound(kernel * input), rng),
            bias: Array1::zeros(output),
            kernel,
            dilation,
        }
    }

    pub fn zeros(input: usize, output: usize, kernel: usize, dilation: usize) -> Self {
        Conv1d {
            weight: Array2::zeros((kernel * input, output)),
            bias: Array1::zeros(output),
            kernel,
            dilation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows() / self.kernel
    }

    fn offset(&self, tap: usize) -> isize {
        (tap as isize - (self.kernel as isize - 1) / 2) * self.dilation as isize
    }

    /// Valid output rows `lo..hi` (within one sequence) for a tap, or `None`
    /// when the tap reads only padding.
    fn span(&self, tap: usize, steps: usize) -> Option<(usize, usize, isize)> {
        let off = self.offset(tap);
        let lo = (-off).max(0) as usize;
        let hi = (steps as isize - off.max(0)).max(0) as usize;
        (lo < hi).then_some((lo, hi, off))
    }

    /// Unfolds `x` (`S*T x C`) into `S*T x kernel*C`.
    pub fn im2col(&self, x: ArrayView2<F>, steps: usize) -> Array2<F> {
        let (rows, c) = x.dim();
        let mut cols = Array2::<F>::zeros((rows, self.kernel * c));
        for tap in 0..self.kernel {
            let Some((lo, hi, off)) = self.span(tap, steps) else { continue };
            for base in (0..rows).step_by(steps) {
                let src_lo = (base + lo) as isize + off;
                let src = x.slice(s![src_lo as usize..src_lo as usize + (hi - lo), ..]);
                cols.slice_mut(s![base + lo..base + hi, tap * c..(tap + 1) * c]).assign(&src);
            }
        }
        cols
    }

    /// Adjoint of [`Conv1d::im2col`].
    fn col2im(&self, dcols: ArrayView2<F>, steps: usize, c: usize) -> Array2<F> {
        let rows = dcols.nrows();
        let mut dx = Array2::<F>::zeros((rows, c));
        for tap in 0..self.kernel {
            let Some((lo, hi, off)) = self.span(tap, steps) else { continue };
            for base in (0..rows).step_by(steps) {
                let dst_lo = (base + lo) as isize + off;
                let src = dcols.slice(s![base + lo..base + hi, tap * c..(tap + 1) * c]);
                let mut dst = dx.slice_mut(s![dst_lo as usize..dst_lo as usize + (hi - lo), ..]);
                dst += &src;
            }
        }
        dx
    }

    /// Returns the output and the unfolded input needed by the backward pass.
    pub fn forward(&self, x: ArrayView2<F>, steps: usize) -> (Array2<F>, Array2<F>) {
        let cols = self.im2col(x, steps);
        let y = cols.dot(&self.weight) + &self.bias;
        (y, cols)
    }

    pub fn backward(&self, cols: ArrayView2<F>, dy: ArrayView2<F>, steps: usize, grad: &mut Conv1d<F>) -> Array2<F> {
        ndarray::linalg::general_mat_mul(F::one(), &cols.t(), &dy, F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        let dcols = dy.dot(&self.weight.t());
        self.col2im(dcols.view(), steps, self.input_dim())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// GELU and its derivative over slices, using
/// `0.5 * (1 + tanh(u)) = sigmoid(2u)`. Concrete per type so the loop
/// vectorises; the `f64` version uses the exact libm `exp`.
macro_rules! gelu_kernel {
    ($name:ident, $t:ty, $exp:expr) => {
        fn $name(src: &[$t], value: &mut [$t], grad: &mut [$t]) {
            const C: $t = GELU_C as $t;
            const A: $t = GELU_A as $t;
            let n = src.len().min(value.len()).min(grad.len());
            for i in 0..n {
                let x = src[i];
                let x2 = x * x;
                let u = C * (x + A * x2 * x);
                let sig = 1.0 / (1.0 + $exp(-2.0 * u));
                value[i] = x * sig;
                // d/du sigmoid(2u) = 2 sig (1 - sig).
                grad[i] = sig + x * 2.0 * sig * (1.0 - sig) * C * (1.0 + 3.0 * A * x2);
            }
        }
    };
}

gelu_kernel!(gelu_kernel_f32, f32, exp_f32);
gelu_kernel!(gelu_kernel_f64, f64, f64::exp);

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    let (mut v, mut g) = ([F::zero()], [F::zero()]);
    F::gelu_kernel(&[x], &mut v, &mut g);
    (v[0], g[0])
}

/// Tanh-approximated GELU. Smooth everywhere, which keeps finite-difference
/// gradient checks free of kinks.
pub fn gelu<F: Scalar>(x: F) -> F {
    gelu_parts(x).0
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    gelu_parts(x).1
}

pub fn gelu_map<F: Scalar>(x: ArrayView2<F>) -> Array2<F> {
    x.mapv(gelu)
}

/// GELU of `x` together with its elementwise derivative, for the backward
/// pass.
pub fn gelu_with_grad<F: Scalar>(x: ArrayView2<F>) -> (Array2<F>, Array2<F>) {
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut value = vec![F::zero(); src.len()];
    let mut grad = vec![F::zero(); src.len()];
    F::gelu_kernel(src, &mut value, &mut grad);
    let dim = x.raw_dim();
    (
        Array2::from_shape_vec(dim.clone(), value).expect("same length"),
        Array2::from_shape_vec(dim, grad).expect("same length"),
    )
}

/// `dy * gelu'(x)` elementwise.
pub fn gelu_backward<F: Scalar>(x: ArrayView2<F>, dy: ArrayView2<F>) -> Array2<F> {
    let mut out = dy.to_owned();
    out.zip_mut_with(&x, |d, &v| *d *= gelu_grad(v));
    out
}
