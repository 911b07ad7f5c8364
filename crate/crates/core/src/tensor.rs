//! Dense row-major `f64` tensors and the numeric kernels behind every layer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, found {found:?}")]
    Shape {
        op: &'static str,
        expected: String,
        found: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {found} were supplied")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional array. `grad`, when present, has the shape of `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "new" });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Marks the tensor as a gradient target.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                expected: format!("{} elements", self.data.len()),
                found: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Tensor {
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor {
            shape,
            data: self.data[start * row..end * row].to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Gathers the given rows along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; within a few ulp of the libm version and
/// several times cheaper, which matters because GELU dominates small convs.
#[inline]
fn tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

impl Activation {
    /// Tanh-approximated GELU, ReLU, or identity.
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + tanh(u))
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        self.apply_with_derivative(x).1
    }

    /// Value and derivative at `x`, sharing the transcendental work.
    #[inline]
    pub fn apply_with_derivative(self, x: f64) -> (f64, f64) {
        match self {
            Activation::Identity => (x, 1.0),
            Activation::Relu => {
                if x > 0.0 {
                    (x, 1.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = tanh(u);
                let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
            }
        }
    }
}

/// Geometry of a 2-D cross-correlation over `[batch, c_in, h, w]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.k) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(TensorError::Usage("conv2d: stride must be >= 1".into()));
        }
        if self.k == 0 || self.k > self.h + 2 * self.padding || self.k > self.w + 2 * self.padding
        {
            return Err(TensorError::Shape {
                op: "conv2d",
                expected: format!(
                    "kernel {k}x{k} to fit padded input {}x{}",
                    self.h + 2 * self.padding,
                    self.w + 2 * self.padding,
                    k = self.k
                ),
                found: vec![self.c_in, self.h, self.w],
            });
        }
        Ok(())
    }
}

pub(crate) mod kernels {
    //! Slice-level kernels shared by the tape and the tape-free inference path.

    use super::{Activation, ConvGeom};

    /// `c = alpha * op(a) * op(b) + beta * c` for row-major operands where
    /// `a` is `m x k` and `b` is `k x n` after the optional transposes.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_trans: bool,
        b: &[f64],
        b_trans: bool,
        beta: f64,
        c: &mut [f64],
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        if k == 0 {
            c[..m * n].iter_mut().for_each(|v| *v *= beta);
            return;
        }
        let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
        // SAFETY: the assertions above bound every index the strides can reach.
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

    /// `op(a) * op(b)` into a fresh `m x n` buffer.
    #[allow(clippy::too_many_arguments)]
    pub fn gemm_new(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool) -> Vec<f64> {
        if k == 0 {
            return vec![0.0; m * n];
        }
        let mut c = Vec::with_capacity(m * n);
        // SAFETY: with beta = 0 the product never reads `c` and writes all
        // `m * n` entries before the length is set.
        unsafe {
            gemm(m, k, n, a, a_trans, b, b_trans, 0.0, std::slice::from_raw_parts_mut(c.as_mut_ptr(), m * n));
            c.set_len(m * n);
        }
        c
    }

    /// Output columns `oj` whose input column `oj * stride + kj - padding`
    /// lies inside `0..w`.
    fn valid_cols(g: &ConvGeom, kj: usize, ow: usize) -> std::ops::Range<usize> {
        let lo = g.padding.saturating_sub(kj).div_ceil(g.stride);
        let hi = ((g.w + g.padding).saturating_sub(kj)).div_ceil(g.stride).min(ow);
        lo.min(hi)..hi
    }

    /// Unfolds `x` into a `[patch, batch * positions]` matrix.
    pub fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let pos = oh * ow;
        let cols_n = g.batch * pos;
        let mut cols = vec![0.0; g.patch() * cols_n];
        for c in 0..g.c_in {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    let dst_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                    let span = valid_cols(g, kj, ow);
                    if span.is_empty() {
                        continue;
                    }
                    let first = span.start * g.stride + kj - g.padding;
                    for b in 0..g.batch {
                        let src = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                        for oi in 0..oh {
                            let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                            if ii < 0 || ii >= g.h as isize {
                                continue;
                            }
                            let src_row = &src[ii as usize * g.w + first..];
                            let dst = &mut dst_row[b * pos + oi * ow..][span.clone()];
                            for (d, s) in dst.iter_mut().zip(src_row.iter().step_by(g.stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Folds a `[patch, batch * positions]` gradient back onto the input.
    pub fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (g.out_h(), g.out_w());
        let pos = oh * ow;
        let cols_n = g.batch * pos;
        for c in 0..g.c_in {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let row = (c * g.k + ki) * g.k + kj;
                    let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                    let span = valid_cols(g, kj, ow);
                    if span.is_empty() {
                        continue;
                    }
                    let first = span.start * g.stride + kj - g.padding;
                    for b in 0..g.batch {
                        let dst = &mut dx[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                        for oi in 0..oh {
                            let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                            if ii < 0 || ii >= g.h as isize {
                                continue;
                            }
                            let src = &src_row[b * pos + oi * ow..][span.clone()];
                            let dst_row = &mut dst[ii as usize * g.w + first..];
                            for (d, s) in dst_row.iter_mut().step_by(g.stride).zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Pre-activation conv output `[batch, c_out, positions]`, plus the unfolded input.
    pub fn conv2d(g: &ConvGeom, kernel: &[f64], bias: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let cols = im2col(g, x);
        let pos = g.positions();
        let cols_n = g.batch * pos;
        let tmp = gemm_new(g.c_out, g.patch(), cols_n, kernel, false, &cols, false);
        let mut out = Vec::with_capacity(g.batch * g.c_out * pos);
        for b in 0..g.batch {
            for (o, &bo) in bias.iter().enumerate().take(g.c_out) {
                out.extend(tmp[o * cols_n + b * pos..][..pos].iter().map(|s| s + bo));
            }
        }
        (out, cols)
    }

    /// Gradients of a conv layer given the upstream gradient `dy` of the
    /// pre-activation output. Returns `(d_kernel, d_bias, d_x)`; `d_kernel`
    /// and `d_x` are only computed when requested, and `cols` may be empty
    /// when `d_kernel` is not.
    pub fn conv2d_backward(
        g: &ConvGeom,
        kernel: &[f64],
        cols: &[f64],
        dy: &[f64],
        want_dk: bool,
        want_dx: bool,
    ) -> (Option<Vec<f64>>, Vec<f64>, Option<Vec<f64>>) {
        let pos = g.positions();
        let cols_n = g.batch * pos;
        let mut dy_t = Vec::with_capacity(g.c_out * cols_n);
        let mut db = vec![0.0; g.c_out];
        for (o, dbo) in db.iter_mut().enumerate() {
            for b in 0..g.batch {
                let src = &dy[(b * g.c_out + o) * pos..][..pos];
                dy_t.extend_from_slice(src);
                *dbo += src.iter().sum::<f64>();
            }
        }
        let dk = want_dk.then(|| gemm_new(g.c_out, cols_n, g.patch(), &dy_t, false, cols, true));
        let dx = want_dx.then(|| {
            let dcols = gemm_new(g.patch(), g.c_out, cols_n, kernel, true, &dy_t, false);
            let mut dx = vec![0.0; g.batch * g.c_in * g.h * g.w];
            col2im(g, &dcols, &mut dx);
            dx
        });
        (dk, db, dx)
    }

    /// `x[batch, n_in] * w[n_out, n_in]^T + b`.
    pub fn affine(batch: usize, n_in: usize, n_out: usize, w: &[f64], b: Option<&[f64]>, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; batch * n_out];
        if let Some(b) = b {
            for row in y.chunks_mut(n_out) {
                row.copy_from_slice(b);
            }
            gemm(batch, n_in, n_out, x, false, w, true, 1.0, &mut y);
        } else {
            gemm(batch, n_in, n_out, x, false, w, true, 0.0, &mut y);
        }
        y
    }

    pub fn activate(act: Activation, x: &mut [f64]) {
        if act != Activation::Identity {
            x.iter_mut().for_each(|v| *v = act.apply(*v));
        }
    }

    /// Mean over the trailing `spatial` elements of every `[batch * channels]` row.
    pub fn global_avg_pool(rows: usize, spatial: usize, x: &[f64]) -> Vec<f64> {
        x.chunks(spatial)
            .take(rows)
            .map(|c| c.iter().sum::<f64>() / spatial as f64)
            .collect()
    }

    pub fn softmax_rows(cols: usize, x: &[f64]) -> Vec<f64> {
        let mut out = x.to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }
}
