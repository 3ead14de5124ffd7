//! Dense row-major tensors and the neural-network kernels built on them.
//!
//! [`Tensor`] is a plain value type: shape plus a flat buffer. All ops are
//! pure functions that never mutate their inputs; images use NCHW layout.
//! Reverse-mode differentiation lives in [`crate::autodiff`] and reuses the
//! forward/backward kernels defined in [`ops`].

pub mod ops;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense N-dimensional array of floats, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build a tensor from a shape and matching flat data.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![v; numel],
        }
    }

    /// Rank-1 tensor with a single element.
    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Fill from a function of the flat index.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(f).collect(),
        }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single element of a rank-anything one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Dimensions of a 4-D tensor as (n, c, h, w).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combine with a shape-equal tensor.
    pub fn zip(&self, other: &Self, mut f: impl FnMut(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise op on shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// Accumulate `other` into self (same shape). Used by gradient buffers.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add_assign on shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        for &v in &self.data {
            let a = v.abs();
            if a > m {
                m = a;
            }
        }
        m
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy into a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                self.shape, shape
            )));
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    /// Permute axes; `perm[i]` names the source axis that lands at axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let r = self.rank();
        if perm.len() != r {
            return Err(Error::InvalidArgument(format!(
                "permute order {perm:?} does not match rank {r}"
            )));
        }
        let mut seen = vec![false; r];
        for &p in perm {
            if p >= r || seen[p] {
                return Err(Error::InvalidArgument(format!("bad permute order {perm:?}")));
            }
            seen[p] = true;
        }
        let src_strides = strides_of(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        // Source strides reordered to output axis order; walk the output
        // linearly with an odometer over the source offset.
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let mut out = vec![T::zero(); self.numel()];
        let mut idx = vec![0usize; r];
        let mut src_off = 0usize;
        let last = r - 1;
        let inner_n = out_shape[last];
        let inner_stride = strides[last];
        let mut pos = 0usize;
        while pos < out.len() {
            if inner_stride == 1 {
                out[pos..pos + inner_n]
                    .copy_from_slice(&self.data[src_off..src_off + inner_n]);
            } else {
                let mut so = src_off;
                for slot in &mut out[pos..pos + inner_n] {
                    *slot = self.data[so];
                    so += inner_stride;
                }
            }
            pos += inner_n;
            // Carry the odometer over the outer axes.
            let mut a = last;
            while a > 0 {
                a -= 1;
                idx[a] += 1;
                src_off += strides[a];
                if idx[a] < out_shape[a] {
                    break;
                }
                src_off -= strides[a] * out_shape[a];
                idx[a] = 0;
            }
            if a == 0 && idx[0] == 0 {
                break;
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Reverse the order of slices along one axis.
    pub fn reverse_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::InvalidArgument(format!(
                "reverse_axis {axis} on rank-{} tensor",
                self.rank()
            )));
        }
        let strides = strides_of(&self.shape);
        let n_axis = self.shape[axis];
        let inner = strides[axis];
        let outer = self.numel() / (n_axis * inner);
        let mut out = vec![T::zero(); self.numel()];
        for o in 0..outer {
            for a in 0..n_axis {
                let src = (o * n_axis + a) * inner;
                let dst = (o * n_axis + (n_axis - 1 - a)) * inner;
                out[dst..dst + inner].copy_from_slice(&self.data[src..src + inner]);
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Concatenate along an axis; all other dims must agree.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} on rank-{rank} tensors"
            )));
        }
        let mut out_shape = parts[0].shape.clone();
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::ShapeMismatch("concat rank mismatch".into()));
            }
            for (a, (&d, &d0)) in p.shape.iter().zip(&parts[0].shape).enumerate() {
                if a != axis && d != d0 {
                    return Err(Error::ShapeMismatch(format!(
                        "concat shapes {:?} vs {:?} differ off-axis",
                        p.shape, parts[0].shape
                    )));
                }
            }
            axis_total += p.shape[axis];
        }
        out_shape[axis] = axis_total;
        let inner: usize = parts[0].shape[axis + 1..].iter().product();
        let outer: usize = parts[0].shape[..axis].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Copy out the half-open range `[from, to)` along an axis.
    pub fn slice_axis(&self, axis: usize, from: usize, to: usize) -> Result<Self> {
        if axis >= self.rank() || from >= to || to > self.shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice [{from}, {to}) along axis {axis} of shape {:?}",
                self.shape
            )));
        }
        let inner: usize = self.shape[axis + 1..].iter().product();
        let outer: usize = self.shape[..axis].iter().product();
        let n_axis = self.shape[axis];
        let mut out_shape = self.shape.clone();
        out_shape[axis] = to - from;
        let mut out = Vec::with_capacity(outer * (to - from) * inner);
        for o in 0..outer {
            let base = o * n_axis * inner;
            out.extend_from_slice(&self.data[base + from * inner..base + to * inner]);
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}
