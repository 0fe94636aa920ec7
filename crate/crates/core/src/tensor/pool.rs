use super::Tensor;
use crate::error::{Error, Result};

/// Output extent of a max-pool with ceiling rounding. Windows that overhang
/// the bottom/right edge are truncated; a window never starts outside the
/// input.
pub fn pool_extent(input: usize, k: usize, stride: usize) -> usize {
    if input <= k {
        return 1;
    }
    let mut out = (input - k).div_ceil(stride) + 1;
    if (out - 1) * stride >= input {
        out -= 1;
    }
    out
}

/// Winning input positions recorded by [`maxpool_forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    argmax: Vec<usize>,
}

impl PoolIndices {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    /// Flat input index of the maximum for each output cell.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

pub fn maxpool_forward(input: &Tensor, k: usize, stride: usize) -> Result<(Tensor, PoolIndices)> {
    let (b, c, h, w) = input.dims4()?;
    if k == 0 || stride == 0 {
        return Err(Error::shape("pool kernel and stride must be positive"));
    }
    let (oh, ow) = (pool_extent(h, k, stride), pool_extent(w, k, stride));
    let x = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = (oy * stride, (oy * stride + k).min(h));
            for ox in 0..ow {
                let (x0, x1) = (ox * stride, (ox * stride + k).min(w));
                let mut best = base + y0 * w + x0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let i = base + y * w + xx;
                        // strict comparison keeps the first index on ties
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    let output_shape = vec![b, c, oh, ow];
    Ok((
        Tensor::from_parts(output_shape.clone(), out),
        PoolIndices {
            input_shape: input.shape().to_vec(),
            output_shape,
            argmax,
        },
    ))
}

/// Route each output gradient to its recorded argmax; overlapping windows
/// accumulate.
pub fn maxpool_backward(grad_out: &Tensor, indices: &PoolIndices) -> Result<Tensor> {
    if grad_out.shape() != indices.output_shape.as_slice() {
        return Err(Error::shape(format!(
            "pool gradient shape {:?} does not match recorded output {:?}",
            grad_out.shape(),
            indices.output_shape
        )));
    }
    let mut gi = Tensor::zeros(&indices.input_shape);
    let gd = gi.data_mut();
    for (&i, &g) in indices.argmax.iter().zip(grad_out.data()) {
        gd[i] += g;
    }
    Ok(gi)
}
