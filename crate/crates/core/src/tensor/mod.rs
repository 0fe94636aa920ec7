//! Dense 64-bit tensors and the numeric primitives the network is built from.
//!
//! Activations use `batch × channels × height × width`, convolution kernels
//! `out_maps × in_maps × k × k`, and affine weights `out_units × in_units`,
//! all row-major.
//!
//! Every layer primitive accumulates its output as `bias + Σ_c partial_c`,
//! one partial per input channel, added in ascending channel order. A zero
//! input channel therefore contributes an exact `+0.0`, which is what lets
//! the pruning search evaluate masked networks from cached per-channel
//! partials and still agree with a plain forward pass bit for bit.

mod affine;
mod conv;
mod loss;
mod pool;

pub use affine::{affine_backward, affine_forward, affine_forward_grouped, affine_group_partial};
pub use conv::{conv2d_backward, conv2d_channel_partial, conv2d_forward};
pub(crate) use conv::conv2d_backward_impl;
pub use loss::{mean_xent, softmax_rows, softmax_xent, xent_row};
pub use pool::{maxpool_backward, maxpool_forward, pool_extent, PoolIndices};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, checking extents, length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("invalid extents {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("tensor")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid extents {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Internal constructor for op outputs whose shape is known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access for in-place parameter updates.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::numeric(format!(
                "{what}: non-finite value {} at flat index {i}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let rows = self.shape[0];
        if start >= end || end > rows {
            return Err(Error::shape(format!(
                "row range {start}..{end} out of 0..{rows}"
            )));
        }
        let stride = self.data.len() / rows;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor::from_parts(
            shape,
            self.data[start * stride..end * stride].to_vec(),
        ))
    }

    /// Gather rows along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = self.shape[0];
        if rows.is_empty() {
            return Err(Error::shape("empty row selection"));
        }
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::shape(format!("row {r} out of 0..{n}")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

/// Output columns per register block of [`lincomb_rows`]; source strides
/// must be a multiple of this.
pub(crate) const BLOCK: usize = 8;
const ROWS: usize = 4;

/// Row stride for `plane` values padded to a whole number of blocks.
pub(crate) fn padded(plane: usize) -> usize {
    plane.div_ceil(BLOCK) * BLOCK
}

/// `out[r·plane + p] = Σ_t coef(r, t) · src[t·stride + p]` for `r < rows`,
/// `p < plane`. Every element is summed sequentially over `t` starting from
/// `0.0`, the same order as repeated [`axpy`] into zeros. Four output rows
/// and eight columns are accumulated at once so each source load is
/// reused. Padding columns of `src` are read and their results discarded.
pub(crate) fn lincomb_rows(
    out: &mut [f64],
    plane: usize,
    rows: usize,
    terms: usize,
    coef: impl Fn(usize, usize) -> f64,
    src: &[f64],
    stride: usize,
    scratch: &mut Vec<[f64; ROWS]>,
) {
    assert!(stride % BLOCK == 0 && stride >= plane && src.len() >= terms * stride);
    assert!(out.len() >= rows * plane);
    scratch.resize(terms, [0.0; ROWS]);
    let mut r0 = 0;
    while r0 < rows {
        let rb = (rows - r0).min(ROWS);
        for (t, w) in scratch.iter_mut().enumerate() {
            for (i, wi) in w.iter_mut().enumerate() {
                *wi = if i < rb { coef(r0 + i, t) } else { 0.0 };
            }
        }
        for p0 in (0..plane).step_by(BLOCK) {
            let mut acc = [[0.0f64; BLOCK]; ROWS];
            for (w, row) in scratch.iter().zip(src[p0..].chunks(stride)) {
                let x = &row[..BLOCK];
                for i in 0..ROWS {
                    for l in 0..BLOCK {
                        acc[i][l] += w[i] * x[l];
                    }
                }
            }
            let n = BLOCK.min(plane - p0);
            for (i, a) in acc.iter().enumerate().take(rb) {
                out[(r0 + i) * plane + p0..][..n].copy_from_slice(&a[..n]);
            }
        }
        r0 += ROWS;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_shapes_and_values() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(Tensor::new(vec![0, 2], vec![]), Err(Error::Shape(_))));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).is_ok());
    }

    #[test]
    fn lincomb_rows_matches_repeated_axpy() {
        let (terms, plane, rows) = (5, 37, 6);
        let stride = padded(plane);
        let mut src = vec![f64::NAN; terms * stride];
        for t in 0..terms {
            for p in 0..plane {
                src[t * stride + p] = ((t * 37 + p) as f64 * 0.713).sin();
            }
        }
        let coef = |r: usize, t: usize| 0.3 - 1.7 * r as f64 + 0.11 * (t * t) as f64;
        let mut expect = vec![0.0; rows * plane];
        for r in 0..rows {
            for t in 0..terms {
                axpy(coef(r, t), &src[t * stride..t * stride + plane], &mut expect[r * plane..(r + 1) * plane]);
            }
        }
        let mut got = vec![9.0; rows * plane];
        lincomb_rows(&mut got, plane, rows, terms, coef, &src, stride, &mut Vec::new());
        assert_eq!(got, expect);
    }

    #[test]
    fn row_selection() {
        let t = Tensor::new(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.select_rows(&[2, 0]).unwrap().data(), &[5., 6., 1., 2.]);
        assert_eq!(t.slice_rows(1, 2).unwrap().data(), &[3., 4.]);
        assert!(t.select_rows(&[3]).is_err());
    }
}
