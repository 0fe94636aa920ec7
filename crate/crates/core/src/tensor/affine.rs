use super::Tensor;
use crate::error::{Error, Result};

fn check(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, d) = input.dims2()?;
    let (u, wd) = weights.dims2()?;
    if wd != d {
        return Err(Error::shape(format!(
            "affine input has {d} features, weights expect {wd}"
        )));
    }
    if bias.shape() != [u] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {u} units",
            bias.shape()
        )));
    }
    Ok((b, d, u))
}

/// `out = input · weightsᵀ + bias`
pub fn affine_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    affine_forward_grouped(input, weights, bias, 1)
}

/// Sum of `weights[u, j] * x[j]` over the `group` inputs `c*group..(c+1)*group`.
#[inline]
pub fn affine_group_partial(x: &[f64], weights_row: &[f64], c: usize, group: usize) -> f64 {
    let r = c * group..(c + 1) * group;
    let mut s = 0.0;
    for (w, v) in weights_row[r.clone()].iter().zip(&x[r]) {
        s += w * v;
    }
    s
}

/// Affine map whose inputs are consumed in consecutive groups of `group`
/// features (one group per upstream channel). Each group's partial sum is
/// added to the bias in ascending group order. `group == 1` is a plain
/// sequential dot product.
pub fn affine_forward_grouped(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    group: usize,
) -> Result<Tensor> {
    let (b, d, u) = check(input, weights, bias)?;
    if group == 0 || d % group != 0 {
        return Err(Error::shape(format!(
            "{d} features cannot be split into groups of {group}"
        )));
    }
    input.check_finite("affine input")?;
    let groups = d / group;
    let wd = weights.data();
    let mut out = Vec::with_capacity(b * u);
    for row in input.data().chunks_exact(d) {
        for k in 0..u {
            let wrow = &wd[k * d..(k + 1) * d];
            let mut acc = bias.data()[k];
            for c in 0..groups {
                acc += affine_group_partial(row, wrow, c, group);
            }
            out.push(acc);
        }
    }
    let out = Tensor::from_parts(vec![b, u], out);
    out.check_finite("affine output")?;
    Ok(out)
}

/// Gradients through [`affine_forward`]: `(grad_input, grad_weights, grad_bias)`.
pub fn affine_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weights: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, d) = input.dims2()?;
    let (u, wd) = weights.dims2()?;
    if wd != d || grad_out.shape() != [b, u] {
        return Err(Error::shape(format!(
            "affine gradient {:?} inconsistent with input {:?} and weights {:?}",
            grad_out.shape(),
            input.shape(),
            weights.shape()
        )));
    }
    let (x, w, g) = (input.data(), weights.data(), grad_out.data());
    let mut gi = vec![0.0; b * d];
    let mut gw = vec![0.0; u * d];
    let mut gb = vec![0.0; u];
    for s in 0..b {
        let xs = &x[s * d..(s + 1) * d];
        let gis = &mut gi[s * d..(s + 1) * d];
        for k in 0..u {
            let gk = g[s * u + k];
            gb[k] += gk;
            let wrow = &w[k * d..(k + 1) * d];
            super::axpy(gk, wrow, gis);
            super::axpy(gk, xs, &mut gw[k * d..(k + 1) * d]);
        }
    }
    Ok((
        Tensor::from_parts(vec![b, d], gi),
        Tensor::from_parts(vec![u, d], gw),
        Tensor::from_parts(vec![u], gb),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_pass_input_through() {
        let x = Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0., -1.]).unwrap();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 4] = 1.0;
        }
        let y = affine_forward(&x, &eye, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn fc4_shape() {
        let y = affine_forward(
            &Tensor::zeros(&[1, 50]),
            &Tensor::zeros(&[200, 50]),
            &Tensor::zeros(&[200]),
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 200]);
    }

    #[test]
    fn scalar_gradient() {
        let x = Tensor::new(vec![1, 1], vec![2.5]).unwrap();
        let w = Tensor::new(vec![1, 1], vec![-3.0]).unwrap();
        let g = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let (gi, gw, gb) = affine_backward(&g, &x, &w).unwrap();
        assert_eq!(gw.data(), &[1.25]);
        assert_eq!(gi.data(), &[-1.5]);
        assert_eq!(gb.data(), &[0.5]);
        let (gi, gw, gb) = affine_backward(&Tensor::zeros(&[1, 1]), &x, &w).unwrap();
        assert!([gi, gw, gb].iter().all(|t| t.data() == [0.0]));
    }

    #[test]
    fn grouping_of_one_is_plain_affine() {
        let x = Tensor::new(vec![1, 4], vec![0.3, -0.2, 0.9, 1.1]).unwrap();
        let w = Tensor::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6, -0.7, 0.8]).unwrap();
        let bias = Tensor::new(vec![2], vec![0.01, -0.02]).unwrap();
        let y = affine_forward(&x, &w, &bias).unwrap();
        for k in 0..2 {
            let mut acc = bias.data()[k];
            for j in 0..4 {
                acc += w.data()[k * 4 + j] * x.data()[j];
            }
            assert_eq!(y.data()[k], acc);
        }
        assert!(affine_forward_grouped(&x, &w, &bias, 3).is_err());
    }

    #[test]
    fn mismatch_rejected() {
        assert!(matches!(
            affine_forward(&Tensor::zeros(&[1, 3]), &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2])),
            Err(Error::Shape(_))
        ));
    }
}
