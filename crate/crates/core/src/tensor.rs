//! Dense row-major `f64` tensors.
//!
//! [`Tensor`] is a plain value type. Differentiation lives on top of it in
//! [`crate::autodiff`], which wraps tensors in tape nodes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` describes exactly `data.len()` values.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} holds {} values but {} were given",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Gaussian entries with mean zero and standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if std == 0.0 {
            return Self {
                shape,
                data: vec![0.0; n],
            };
        }
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        Self {
            shape,
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Last extent, or 1 for a scalar.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, &shape));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Largest elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Matrix product over the last two axes. `other` is either a plain
    /// matrix broadcast across the leading axes of `self`, or has the same
    /// leading axes as `self`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        plan.forward(&self.data, &other.data, &mut out);
        Tensor::new(plan.out_shape, out)
    }

    /// Reorders axes so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim("permute", &self.shape, axes));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        // Trailing axes left in place form contiguous runs copied whole.
        let kept = axes.iter().rev().enumerate().take_while(|&(i, &a)| a == nd - 1 - i).count();
        let run: usize = self.shape[nd - kept..].iter().product();
        let outer = nd - kept;
        let in_strides = strides(&self.shape);
        let steps: Vec<usize> = axes[..outer].iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; outer];
        let mut off = 0usize;
        for _ in 0..self.numel() / run.max(1) {
            out.extend_from_slice(&self.data[off..off + run]);
            for ax in (0..outer).rev() {
                idx[ax] += 1;
                off += steps[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= steps[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Sums leading axes away so the result has shape `target`, which must
    /// be a suffix of `self.shape()`.
    pub(crate) fn reduce_to(&self, target: &[usize]) -> Tensor {
        if self.shape == target {
            return self.clone();
        }
        let inner: usize = target.iter().product();
        let mut out = vec![0.0; inner];
        for chunk in self.data.chunks(inner.max(1)) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        Tensor {
            shape: target.to_vec(),
            data: out,
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// True when `rhs` can broadcast against `lhs` as a trailing suffix.
pub(crate) fn is_suffix(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

/// `c = a·b + beta·c` for row-major operands; `a_t`/`b_t` read the stored
/// buffer as the transpose of a `[k, m]` / `[n, k]` matrix instead.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping shared by the value-level and tape-level matmul.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single matrix shared by every batch entry of `a`.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::dim("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != kb {
            return Err(Error::dim("matmul", a, b));
        }
        let lead = &a[..a.len() - 2];
        let shared_rhs = b.len() == 2;
        if !shared_rhs && b[..b.len() - 2] != *lead {
            return Err(Error::dim("matmul", a, b));
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: lead.iter().product(),
            m,
            k,
            n,
            shared_rhs,
            out_shape,
        })
    }

    pub fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            gemm(self.batch * m, k, n, a, false, b, false, out, 0.0);
        } else {
            for i in 0..self.batch {
                gemm(
                    m,
                    k,
                    n,
                    &a[i * m * k..],
                    false,
                    &b[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    0.0,
                );
            }
        }
    }

    /// Gradient with respect to the left operand: `g·bᵀ`.
    pub fn grad_lhs(&self, g: &[f64], b: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![0.0; self.batch * m * k];
        if self.shared_rhs {
            gemm(self.batch * m, n, k, g, false, b, true, &mut out, 0.0);
        } else {
            for i in 0..self.batch {
                gemm(
                    m,
                    n,
                    k,
                    &g[i * m * n..],
                    false,
                    &b[i * k * n..],
                    true,
                    &mut out[i * m * k..],
                    0.0,
                );
            }
        }
        out
    }

    /// Gradient with respect to the right operand: `aᵀ·g`, summed over the
    /// batch when the right operand is shared.
    pub fn grad_rhs(&self, a: &[f64], g: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.shared_rhs {
            let mut out = vec![0.0; k * n];
            gemm(k, self.batch * m, n, a, true, g, false, &mut out, 0.0);
            out
        } else {
            let mut out = vec![0.0; self.batch * k * n];
            for i in 0..self.batch {
                gemm(
                    k,
                    m,
                    n,
                    &a[i * m * k..],
                    true,
                    &g[i * m * n..],
                    false,
                    &mut out[i * k * n..],
                    0.0,
                );
            }
            out
        }
    }
}
