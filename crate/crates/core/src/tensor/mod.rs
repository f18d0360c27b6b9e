//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computations are
//! recorded on a [`Tape`] through [`Var`] handles; [`Tape::backward`] then
//! replays the tape in reverse and returns [`Gradients`] for every leaf that
//! was registered with `requires_grad`.
//!
//! Only two broadcasting forms exist: equal shapes, and a one-element tensor
//! against anything. Channel-wise ops treat rank-3 tensors as `[C, H, W]` and
//! rank-4 tensors as `[N, C, H, W]`.

mod gemm;
pub mod gradcheck;
pub(crate) mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub use gradcheck::{gradcheck, gradcheck_many, GradcheckReport};
pub use tape::{BatchStats, BnMode, Gradients, Padding, Tape, Var};

/// Floating-point element type of a tensor.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// All pointers and strides must describe valid, non-overlapping regions
    /// of the stated `m x k`, `k x n` and `m x n` extents.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to any Real")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R = f32> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<R>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, R::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: R) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// One-element tensor of shape `[1]`.
    pub fn scalar(value: R) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(rng);
            R::of(v * std)
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| R::of(rng.random_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    pub fn item(&self) -> R {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> R {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            debug_assert!(i < e);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(R) -> R) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::of(v.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of all entries, accumulated in `f64`.
    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|v| v.f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<R>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim(format!(
                    "stack of {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    /// Slice `index` along the leading axis.
    pub fn outer(&self, index: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() > 1 {
            self.shape[1..].to_vec()
        } else {
            vec![1]
        };
        Self {
            shape,
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stacks `n` copies along a new leading axis.
    pub fn repeat_outer(&self, n: usize) -> Self {
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shape);
        let mut data = Vec::with_capacity(n * self.numel());
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Self { shape, data }
    }

    /// Concatenates `[C_i, ...]` tensors along their first axis.
    pub fn concat_outer(items: &[&Tensor<R>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::dim("cannot concatenate zero tensors"))?;
        let mut lead = 0;
        let mut data = Vec::new();
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::dim(format!(
                    "concat of {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            lead += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Self::new(shape, data)
    }
}

/// Splits a channel-bearing shape into `(N, C, H, W)`.
pub(crate) fn nchw(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::dim(format!(
            "expected [C,H,W] or [N,C,H,W], got {shape:?}"
        ))),
    }
}

/// Shape with the channel axis replaced.
pub(crate) fn with_channels(shape: &[usize], c: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    let axis = shape.len() - 3;
    out[axis] = c;
    out
}

/// Pixel shuffle/unshuffle as pure index maps; used by the tape ops and by
/// preprocessing code that has no tape.
pub fn pixel_unshuffle<R: Real>(x: &Tensor<R>, d: usize) -> Result<Tensor<R>> {
    let (n, c, h, w) = nchw(x.shape())?;
    if d == 0 || h % d != 0 || w % d != 0 {
        return Err(Error::dim(format!(
            "pixel_unshuffle factor {d} does not divide {h}x{w}"
        )));
    }
    let (ho, wo) = (h / d, w / d);
    let mut out = vec![R::zero(); x.numel()];
    for b in 0..n {
        for ci in 0..c {
            for a in 0..d {
                for bb in 0..d {
                    let co = ci * d * d + a * d + bb;
                    for i in 0..ho {
                        for j in 0..wo {
                            let src = ((b * c + ci) * h + i * d + a) * w + j * d + bb;
                            let dst = ((b * c * d * d + co) * ho + i) * wo + j;
                            out[dst] = x.data[src];
                        }
                    }
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = c * d * d;
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(shape, out)
}

pub fn pixel_shuffle<R: Real>(x: &Tensor<R>, d: usize) -> Result<Tensor<R>> {
    let (n, cd, ho, wo) = nchw(x.shape())?;
    if d == 0 || cd % (d * d) != 0 {
        return Err(Error::dim(format!(
            "pixel_shuffle factor {d} does not divide {cd} channels"
        )));
    }
    let c = cd / (d * d);
    let (h, w) = (ho * d, wo * d);
    let mut out = vec![R::zero(); x.numel()];
    for b in 0..n {
        for ci in 0..c {
            for a in 0..d {
                for bb in 0..d {
                    let co = ci * d * d + a * d + bb;
                    for i in 0..ho {
                        for j in 0..wo {
                            let dst = ((b * c + ci) * h + i * d + a) * w + j * d + bb;
                            let src = ((b * cd + co) * ho + i) * wo + j;
                            out[dst] = x.data[src];
                        }
                    }
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 3] = c;
    shape[r - 2] = h;
    shape[r - 1] = w;
    Tensor::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data() {
        assert!(Tensor::<f32>::new([2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
    }

    #[test]
    fn unshuffle_iota() {
        let x = Tensor::<f32>::from_fn([1, 4, 4], |i| i as f32);
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[4, 2, 2]);
        assert_eq!(&y.data()[..4], &[0.0, 2.0, 8.0, 10.0]);
        assert_eq!(pixel_shuffle(&y, 2).unwrap(), x);
    }

    #[test]
    fn unshuffle_rejects_indivisible() {
        let x = Tensor::<f32>::zeros([1, 5, 4]);
        assert!(matches!(pixel_unshuffle(&x, 2), Err(Error::Dimension(_))));
    }
}
