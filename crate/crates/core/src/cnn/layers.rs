//! Forward and backward passes of the individual layers.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Convolution of an `S×S×3` input with `K` kernels of shape `k×k×3`,
/// stride 1, zero same-padding. Weights are `[K, k, k, 3]`.
pub fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, cols, kc, kw) = conv_dims(x, w, b)?;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = vec![0.0; rows * cols * kc];
    if kw == 1 {
        for (px, o) in xd.chunks_exact(3).zip(out.chunks_exact_mut(kc)) {
            for k in 0..kc {
                let wk = &wd[k * 3..k * 3 + 3];
                o[k] = bd[k] + wk[0] * px[0] + wk[1] * px[1] + wk[2] * px[2];
            }
        }
    } else {
        let pad = (kw - 1) / 2;
        for y in 0..rows {
            for xx in 0..cols {
                let o = &mut out[(y * cols + xx) * kc..(y * cols + xx + 1) * kc];
                o.copy_from_slice(bd);
                for dy in 0..kw {
                    let Some(sy) = (y + dy).checked_sub(pad).filter(|v| *v < rows) else {
                        continue;
                    };
                    for dx in 0..kw {
                        let Some(sx) = (xx + dx).checked_sub(pad).filter(|v| *v < cols) else {
                            continue;
                        };
                        let px = &xd[(sy * cols + sx) * 3..(sy * cols + sx) * 3 + 3];
                        for (k, ok) in o.iter_mut().enumerate() {
                            let wi = ((k * kw + dy) * kw + dx) * 3;
                            *ok += wd[wi] * px[0] + wd[wi + 1] * px[1] + wd[wi + 2] * px[2];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[rows, cols, kc], out)
}

/// Returns `(grad_x, grad_w, grad_b)` for [`conv_forward`].
pub fn conv_backward(
    grad_out: &Tensor,
    x: &Tensor,
    w: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let kc = w.shape().first().copied().unwrap_or(0);
    let b = Tensor::zeros(&[kc]);
    let (rows, cols, kc, kw) = conv_dims(x, w, &b)?;
    grad_out.expect_shape(&[rows, cols, kc], "conv grad_out")?;
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    let mut gx = vec![0.0; xd.len()];
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; kc];
    let pad = (kw - 1) / 2;
    for y in 0..rows {
        for xx in 0..cols {
            let g = &gd[(y * cols + xx) * kc..(y * cols + xx + 1) * kc];
            for (k, gk) in g.iter().enumerate() {
                gb[k] += gk;
            }
            for dy in 0..kw {
                let Some(sy) = (y + dy).checked_sub(pad).filter(|v| *v < rows) else {
                    continue;
                };
                for dx in 0..kw {
                    let Some(sx) = (xx + dx).checked_sub(pad).filter(|v| *v < cols) else {
                        continue;
                    };
                    let pi = (sy * cols + sx) * 3;
                    for (k, gk) in g.iter().enumerate() {
                        let wi = ((k * kw + dy) * kw + dx) * 3;
                        for c in 0..3 {
                            gw[wi + c] += gk * xd[pi + c];
                            gx[pi + c] += gk * wd[wi + c];
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(w.shape(), gw)?,
        Tensor::from_vec(&[kc], gb)?,
    ))
}

fn conv_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let [rows, cols, 3] = *x.shape() else {
        return Err(Error::Shape(format!("conv input must be [S, S, 3], got {:?}", x.shape())));
    };
    let [kc, kh, kw, 3] = *w.shape() else {
        return Err(Error::Shape(format!("conv weights must be [K, k, k, 3], got {:?}", w.shape())));
    };
    if kh != kw || kw == 0 {
        return Err(Error::Shape(format!("conv kernels must be square, got {kh}x{kw}")));
    }
    b.expect_shape(&[kc], "conv bias")?;
    Ok((rows, cols, kc, kw))
}

/// Max pooling over non-overlapping `pool×pool` windows.
///
/// Returns the pooled tensor and, per output, the flat input index of the
/// maximum (first occurrence in row-major window order on ties).
pub fn maxpool_forward(x: &Tensor, pool: usize) -> Result<(Tensor, Vec<usize>)> {
    let [rows, cols, kc] = *x.shape() else {
        return Err(Error::Shape(format!("pool input must be [S, S, K], got {:?}", x.shape())));
    };
    if pool == 0 || rows % pool != 0 || cols % pool != 0 {
        return Err(Error::Shape(format!(
            "input {rows}x{cols} is not divisible by pool size {pool}"
        )));
    }
    let (gr, gc) = (rows / pool, cols / pool);
    let xd = x.data();
    let mut out = vec![f64::NEG_INFINITY; gr * gc * kc];
    let mut arg = vec![0usize; gr * gc * kc];
    for oy in 0..gr {
        for ox in 0..gc {
            let ob = (oy * gc + ox) * kc;
            for dy in 0..pool {
                for dx in 0..pool {
                    let ib = ((oy * pool + dy) * cols + ox * pool + dx) * kc;
                    for k in 0..kc {
                        let v = xd[ib + k];
                        if v > out[ob + k] {
                            out[ob + k] = v;
                            arg[ob + k] = ib + k;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[gr, gc, kc], out)?, arg))
}

/// Routes each pooled gradient to its argmax input position.
pub fn maxpool_backward(grad_out: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::Shape(format!(
            "pool backward: {} gradients for {} argmax entries",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut gx = Tensor::zeros(input_shape);
    let gxd = gx.data_mut();
    for (g, &i) in grad_out.data().iter().zip(argmax) {
        gxd[i] += g;
    }
    Ok(gx)
}

/// Affine layer `w·x + b` with `w` of shape `[out, in]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n_out, n_in) = linear_dims(x, w, b)?;
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let out = (0..n_out)
        .map(|o| {
            let row = &wd[o * n_in..(o + 1) * n_in];
            bd[o] + row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    Tensor::from_vec(&[n_out], out)
}

/// Returns `(grad_x, grad_w, grad_b)` for [`linear_forward`].
pub fn linear_backward(grad_out: &Tensor, x: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let n_out = grad_out.len();
    let b = Tensor::zeros(&[n_out]);
    let (n_out, n_in) = linear_dims(x, w, &b)?;
    let (xd, wd, gd) = (x.data(), w.data(), grad_out.data());
    let mut gx = vec![0.0; n_in];
    let mut gw = vec![0.0; n_out * n_in];
    for o in 0..n_out {
        let g = gd[o];
        let row = &wd[o * n_in..(o + 1) * n_in];
        let grow = &mut gw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] = g * xd[i];
            gx[i] += g * row[i];
        }
    }
    Ok((
        Tensor::from_vec(x.shape(), gx)?,
        Tensor::from_vec(w.shape(), gw)?,
        Tensor::from_vec(&[n_out], gd.to_vec())?,
    ))
}

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let [n_out, n_in] = *w.shape() else {
        return Err(Error::Shape(format!("linear weights must be 2-D, got {:?}", w.shape())));
    };
    if x.len() != n_in {
        return Err(Error::Shape(format!(
            "linear input has {} values, weights expect {n_in}",
            x.len()
        )));
    }
    b.expect_shape(&[n_out], "linear bias")?;
    Ok((n_out, n_in))
}

/// Fully connected layer followed by ReLU. Returns `(activation, pre_activation)`.
pub fn fc_relu_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let pre = linear_forward(x, w, b)?;
    let act = Tensor::from_vec(pre.shape(), pre.data().iter().map(|v| v.max(0.0)).collect())?;
    Ok((act, pre))
}

/// Backward of [`fc_relu_forward`]; the ReLU passes no gradient where the
/// pre-activation is `<= 0`.
pub fn fc_relu_backward(
    grad_out: &Tensor,
    x: &Tensor,
    w: &Tensor,
    pre: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    pre.expect_shape(grad_out.shape(), "relu grad_out")?;
    let masked: Vec<f64> = grad_out
        .data()
        .iter()
        .zip(pre.data())
        .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
        .collect();
    linear_backward(&Tensor::from_vec(grad_out.shape(), masked)?, x, w)
}
