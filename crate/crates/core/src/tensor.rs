//! Dense row-major tensors and the raw kernels shared by the autodiff tape
//! and the inference path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis (1 for a scalar).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Converts element type (through `f64`).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Two-dimensional matrix product.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_shapes(self.shape(), rhs.shape(), false, false)
            .map(|(batch, m, k, n)| {
                let mut out = vec![T::zero(); batch * m * n];
                bmm(batch, m, k, n, &self.data, false, &rhs.data, false, &mut out);
                let mut shape = self.shape[..self.ndim() - 2].to_vec();
                shape.extend([m, n]);
                Tensor { shape, data: out }
            })
    }
}

/// Validates a (possibly batched) matmul and returns `(batch, m, k, n)`.
///
/// Both operands must be 2-D, or both 3-D with equal batch size.
pub fn matmul_shapes(
    a: &[usize],
    b: &[usize],
    trans_a: bool,
    trans_b: bool,
) -> Result<(usize, usize, usize, usize)> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() != b.len() || !(a.len() == 2 || a.len() == 3) {
        return Err(err());
    }
    let r = a.len();
    let batch = if r == 3 {
        if a[0] != b[0] {
            return Err(err());
        }
        a[0]
    } else {
        1
    };
    let (m, ka) = if trans_a { (a[r - 1], a[r - 2]) } else { (a[r - 2], a[r - 1]) };
    let (kb, n) = if trans_b { (b[r - 1], b[r - 2]) } else { (b[r - 2], b[r - 1]) };
    if ka != kb {
        return Err(err());
    }
    Ok((batch, m, ka, n))
}

/// Batched product over contiguous `[batch, ., .]` buffers; overwrites `c`.
#[allow(clippy::too_many_arguments)]
pub fn bmm<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
) {
    bmm_acc(batch, m, k, n, a, trans_a, b, trans_b, T::zero(), c)
}

/// Like [`bmm`] but computes `c = a b + beta c`.
#[allow(clippy::too_many_arguments)]
pub fn bmm_acc<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    let (sa, sb, sc) = (m * k, k * n, m * n);
    for i in 0..batch {
        gemm(
            m,
            k,
            n,
            &a[i * sa..(i + 1) * sa],
            trans_a,
            &b[i * sb..(i + 1) * sb],
            trans_b,
            beta,
            &mut c[i * sc..(i + 1) * sc],
        );
    }
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`, in place.
pub fn softmax_in_place<T: Scalar>(data: &mut [T], shape: &[usize], axis: usize) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(data[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (data[base + j * inner] - max).exp();
                data[base + j * inner] = e;
                total += e;
            }
            for j in 0..len {
                data[base + j * inner] /= total;
            }
        }
    }
}

/// Softmax over contiguous rows of width `width`.
pub fn softmax_rows<T: Scalar>(data: &mut [T], width: usize) {
    for row in data.chunks_mut(width) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// RMS normalization of each row; returns per-row `1/sqrt(mean(x^2)+eps)`.
pub fn rms_norm_rows<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> Vec<T> {
    let width = gain.len();
    let mut inv = Vec::with_capacity(x.len() / width.max(1));
    for (row, orow) in x.chunks(width).zip(out.chunks_mut(width)) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / T::lit(width as f64);
        let r = T::one() / (ms + eps).sqrt();
        for ((o, &v), &g) in orow.iter_mut().zip(row).zip(gain) {
            *o = g * v * r;
        }
        inv.push(r);
    }
    inv
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
