use super::{lincomb_rows, padded, Tensor};
use crate::error::{Error, Result};

struct ConvDims {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    maps: usize,
    kh: usize,
    kw: usize,
}

impl ConvDims {
    fn out_h(&self) -> usize {
        self.height - self.kh + 1
    }
    fn out_w(&self) -> usize {
        self.width - self.kw + 1
    }
    fn plane(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

fn check_dims(input: &Tensor, kernels: &Tensor) -> Result<ConvDims> {
    let (batch, channels, height, width) = input.dims4()?;
    let (maps, kc, kh, kw) = kernels.dims4()?;
    if kc != channels {
        return Err(Error::shape(format!(
            "conv input has {channels} channels, kernels expect {kc}"
        )));
    }
    if kh > height || kw > width {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} larger than input {height}x{width}"
        )));
    }
    Ok(ConvDims {
        batch,
        channels,
        height,
        width,
        maps,
        kh,
        kw,
    })
}

/// Unfold one input plane into `kh*kw` rows of `stride` values, the first
/// `oh*ow` of each being the shifted window; the rest is zero padding.
fn im2col(channel: &[f64], width: usize, kh: usize, kw: usize, oh: usize, ow: usize, stride: usize, col: &mut Vec<f64>) {
    col.clear();
    col.resize(kh * kw * stride, 0.0);
    for dy in 0..kh {
        for dx in 0..kw {
            let row = &mut col[(dy * kw + dx) * stride..][..oh * ow];
            for oy in 0..oh {
                let src = &channel[(oy + dy) * width + dx..][..ow];
                row[oy * ow..(oy + 1) * ow].copy_from_slice(src);
            }
        }
    }
}

/// Reusable buffers for the per-channel kernels.
#[derive(Default)]
struct Scratch {
    col: Vec<f64>,
    coef: Vec<[f64; 4]>,
}

/// Contribution of input channel `c` to every output map, written into
/// `partial` (`maps × out_plane`).
fn channel_partial_into(
    channel: &[f64],
    height: usize,
    width: usize,
    kernels: &Tensor,
    c: usize,
    scratch: &mut Scratch,
    partial: &mut [f64],
) {
    let [maps, channels, kh, kw] = kernels.shape()[..] else {
        unreachable!()
    };
    let (oh, ow) = (height - kh + 1, width - kw + 1);
    let plane = oh * ow;
    let stride = padded(plane);
    let kk = kh * kw;
    im2col(channel, width, kh, kw, oh, ow, stride, &mut scratch.col);
    let kd = kernels.data();
    lincomb_rows(
        partial,
        plane,
        maps,
        kk,
        |m, t| kd[(m * channels + c) * kk + t],
        &scratch.col,
        stride,
        &mut scratch.coef,
    );
}

/// Contribution of one input plane (channel `c`, `height × width`) to all
/// output maps of a valid stride-1 cross-correlation, without bias.
pub fn conv2d_channel_partial(
    channel: &[f64],
    height: usize,
    width: usize,
    kernels: &Tensor,
    c: usize,
) -> Result<Vec<f64>> {
    let (maps, channels, kh, kw) = kernels.dims4()?;
    if c >= channels || channel.len() != height * width || kh > height || kw > width {
        return Err(Error::shape(format!(
            "channel {c} plane {height}x{width} incompatible with kernels {:?}",
            kernels.shape()
        )));
    }
    let mut partial = vec![0.0; maps * (height - kh + 1) * (width - kw + 1)];
    channel_partial_into(channel, height, width, kernels, c, &mut Scratch::default(), &mut partial);
    Ok(partial)
}

/// Valid (unpadded) stride-1 cross-correlation.
///
/// `out[b,m,y,x] = bias[m] + Σ_{c,dy,dx} input[b,c,y+dy,x+dx] · kernels[m,c,dy,dx]`
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = check_dims(input, kernels)?;
    if bias.shape() != [d.maps] {
        return Err(Error::shape(format!(
            "bias shape {:?} does not match {} maps",
            bias.shape(),
            d.maps
        )));
    }
    input.check_finite("conv2d input")?;
    let plane = d.plane();
    let in_plane = d.height * d.width;
    let mut out = vec![0.0; d.batch * d.maps * plane];
    let mut partial = vec![0.0; d.maps * plane];
    let mut scratch = Scratch::default();
    for b in 0..d.batch {
        let out_b = &mut out[b * d.maps * plane..(b + 1) * d.maps * plane];
        for (m, &bm) in bias.data().iter().enumerate() {
            out_b[m * plane..(m + 1) * plane].fill(bm);
        }
        for c in 0..d.channels {
            let ch = &input.data()[(b * d.channels + c) * in_plane..][..in_plane];
            channel_partial_into(ch, d.height, d.width, kernels, c, &mut scratch, &mut partial);
            for (o, p) in out_b.iter_mut().zip(&partial) {
                *o += *p;
            }
        }
    }
    let out = Tensor::from_parts(vec![d.batch, d.maps, d.out_h(), d.out_w()], out);
    out.check_finite("conv2d output")?;
    Ok(out)
}

/// Gradients of a scalar loss through [`conv2d_forward`]:
/// `(grad_input, grad_kernels, grad_bias)`.
pub fn conv2d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (gi, gk, gb) = conv2d_backward_impl(grad_out, input, kernels, true)?;
    Ok((gi.expect("input gradient requested"), gk, gb))
}

pub(crate) fn conv2d_backward_impl(
    grad_out: &Tensor,
    input: &Tensor,
    kernels: &Tensor,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let d = check_dims(input, kernels)?;
    let expected = [d.batch, d.maps, d.out_h(), d.out_w()];
    if grad_out.shape() != expected {
        return Err(Error::shape(format!(
            "conv gradient shape {:?}, expected {expected:?}",
            grad_out.shape()
        )));
    }
    let (oh, ow) = (d.out_h(), d.out_w());
    let plane = d.plane();
    let in_plane = d.height * d.width;
    let kk = d.kh * d.kw;
    let kd = kernels.data();
    let god = grad_out.data();

    let mut gk = vec![0.0; kernels.len()];
    let mut gb = vec![0.0; d.maps];
    let mut gi = if want_input {
        vec![0.0; input.len()]
    } else {
        Vec::new()
    };
    let stride = padded(plane);
    let kk_stride = padded(kk);
    let mut scratch = Scratch::default();
    // grad_out of one sample with rows padded to `stride`
    let mut go_pad = vec![0.0; d.maps * stride];
    // im2col transposed: one row of `kk` window values per output position
    let mut col_t = vec![0.0; plane * kk_stride];
    let mut gk_b = vec![0.0; d.maps * kk];
    let mut gcol = vec![0.0; kk * plane];

    for b in 0..d.batch {
        let go_b = &god[b * d.maps * plane..(b + 1) * d.maps * plane];
        for m in 0..d.maps {
            gb[m] += go_b[m * plane..(m + 1) * plane].iter().sum::<f64>();
            go_pad[m * stride..m * stride + plane].copy_from_slice(&go_b[m * plane..(m + 1) * plane]);
        }
        for c in 0..d.channels {
            let ch = &input.data()[(b * d.channels + c) * in_plane..][..in_plane];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut col_t[(oy * ow + ox) * kk_stride..][..kk];
                    for dy in 0..d.kh {
                        let src = &ch[(oy + dy) * d.width + ox..][..d.kw];
                        row[dy * d.kw..(dy + 1) * d.kw].copy_from_slice(src);
                    }
                }
            }
            // gk[m, c, j] += Σ_p grad_out[m, p] · window_j[p]
            lincomb_rows(&mut gk_b, kk, d.maps, plane, |m, p| go_b[m * plane + p], &col_t, kk_stride, &mut scratch.coef);
            for m in 0..d.maps {
                let dst = &mut gk[(m * d.channels + c) * kk..][..kk];
                for (g, v) in dst.iter_mut().zip(&gk_b[m * kk..(m + 1) * kk]) {
                    *g += *v;
                }
            }
            if want_input {
                // gcol[j, p] = Σ_m kernel[m, c, j] · grad_out[m, p]
                lincomb_rows(&mut gcol, plane, kk, d.maps, |j, m| kd[(m * d.channels + c) * kk + j], &go_pad, stride, &mut scratch.coef);
                let gi_c = &mut gi[(b * d.channels + c) * in_plane..][..in_plane];
                for dy in 0..d.kh {
                    for dx in 0..d.kw {
                        let row = &gcol[(dy * d.kw + dx) * plane..][..plane];
                        for oy in 0..oh {
                            let dst = &mut gi_c[(oy + dy) * d.width + dx..][..ow];
                            for (t, s) in dst.iter_mut().zip(&row[oy * ow..(oy + 1) * ow]) {
                                *t += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    let gi = want_input.then(|| Tensor::from_parts(input.shape().to_vec(), gi));
    Ok((
        gi,
        Tensor::from_parts(kernels.shape().to_vec(), gk),
        Tensor::from_parts(vec![d.maps], gb),
    ))
}
