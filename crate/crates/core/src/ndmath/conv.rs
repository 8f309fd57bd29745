use super::{Seq, Tensor};
use crate::error::{check_len, Error, Result};

fn conv_dims(w: &Tensor) -> Result<(usize, usize, usize)> {
    match w.shape[..] {
        [cout, cin, kernel] if kernel % 2 == 1 => Ok((cout, cin, kernel)),
        [_, _, kernel] => Err(Error::InvalidArgument(format!("conv kernel must be odd, got {kernel}"))),
        _ => Err(Error::InvalidArgument(format!("conv weight must be [cout, cin, kernel], got {:?}", w.shape))),
    }
}

/// 1-D cross-correlation with zero padding `(kernel - 1) / 2` plus bias.
///
/// `weight` is `[cout, cin, kernel]`, `bias` has `cout` entries.
pub fn conv1d(x: &Seq, weight: &Tensor, bias: &[f64]) -> Result<Seq> {
    let (cout, cin, kernel) = conv_dims(weight)?;
    check_len("conv1d input channels", cin, x.channels)?;
    check_len("conv1d bias", cout, bias.len())?;
    let pad = (kernel - 1) / 2;
    let mut out = Seq::zeros(x.len, cout);
    for i in 0..x.len {
        for o in 0..cout {
            let mut acc = bias[o];
            for t in 0..kernel {
                let Some(src) = (i + t).checked_sub(pad).filter(|s| *s < x.len) else {
                    continue;
                };
                let row = x.row(src);
                let wbase = (o * cin) * kernel + t;
                for c in 0..cin {
                    acc += weight.data[wbase + c * kernel] * row[c];
                }
            }
            *out.at_mut(i, o) = acc;
        }
    }
    Ok(out)
}

/// Backward of [`conv1d`]: `(grad_x, grad_weight, grad_bias)`.
pub fn conv1d_backward(x: &Seq, weight: &Tensor, grad_out: &Seq) -> Result<(Seq, Tensor, Vec<f64>)> {
    let (cout, cin, kernel) = conv_dims(weight)?;
    check_len("conv1d grad channels", cout, grad_out.channels)?;
    check_len("conv1d grad length", x.len, grad_out.len)?;
    let pad = (kernel - 1) / 2;
    let mut gx = Seq::zeros(x.len, cin);
    let mut gw = Tensor::zeros(&weight.shape);
    let mut gb = vec![0.0; cout];
    for i in 0..x.len {
        for o in 0..cout {
            let g = grad_out.at(i, o);
            gb[o] += g;
            if g == 0.0 {
                continue;
            }
            for t in 0..kernel {
                let Some(src) = (i + t).checked_sub(pad).filter(|s| *s < x.len) else {
                    continue;
                };
                let wbase = (o * cin) * kernel + t;
                for c in 0..cin {
                    gw.data[wbase + c * kernel] += g * x.at(src, c);
                    *gx.at_mut(src, c) += g * weight.data[wbase + c * kernel];
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

fn deconv_dims(w: &Tensor) -> Result<(usize, usize)> {
    match w.shape[..] {
        [2, cout, cin] => Ok((cout, cin)),
        _ => Err(Error::InvalidArgument(format!("deconv weight must be [2, cout, cin], got {:?}", w.shape))),
    }
}

/// Transposed convolution with kernel 2 and stride 2: doubles the length.
///
/// `out[2i + t][o] = bias[o] + sum_c weight[t][o][c] * x[i][c]`.
pub fn deconv1d_x2(x: &Seq, weight: &Tensor, bias: &[f64]) -> Result<Seq> {
    let (cout, cin) = deconv_dims(weight)?;
    check_len("deconv input channels", cin, x.channels)?;
    check_len("deconv bias", cout, bias.len())?;
    let mut out = Seq::zeros(2 * x.len, cout);
    for i in 0..x.len {
        let row = x.row(i);
        for t in 0..2 {
            for o in 0..cout {
                let w = &weight.data[(t * cout + o) * cin..(t * cout + o + 1) * cin];
                let acc: f64 = w.iter().zip(row).map(|(a, b)| a * b).sum();
                *out.at_mut(2 * i + t, o) = bias[o] + acc;
            }
        }
    }
    Ok(out)
}

/// Backward of [`deconv1d_x2`]: `(grad_x, grad_weight, grad_bias)`.
pub fn deconv1d_x2_backward(x: &Seq, weight: &Tensor, grad_out: &Seq) -> Result<(Seq, Tensor, Vec<f64>)> {
    let (cout, cin) = deconv_dims(weight)?;
    check_len("deconv grad length", 2 * x.len, grad_out.len)?;
    check_len("deconv grad channels", cout, grad_out.channels)?;
    let mut gx = Seq::zeros(x.len, cin);
    let mut gw = Tensor::zeros(&weight.shape);
    let mut gb = vec![0.0; cout];
    for i in 0..x.len {
        for t in 0..2 {
            for o in 0..cout {
                let g = grad_out.at(2 * i + t, o);
                gb[o] += g;
                let base = (t * cout + o) * cin;
                for c in 0..cin {
                    gw.data[base + c] += g * x.at(i, c);
                    *gx.at_mut(i, c) += g * weight.data[base + c];
                }
            }
        }
    }
    Ok((gx, gw, gb))
}

/// Splits an even-length sequence into its first and second halves.
pub fn split_halves(x: &Seq) -> Result<(Seq, Seq)> {
    if x.len % 2 != 0 {
        return Err(Error::InvalidArgument(format!("cannot split odd length {}", x.len)));
    }
    let mid = x.len / 2 * x.channels;
    Ok((
        Seq { len: x.len / 2, channels: x.channels, data: x.data[..mid].to_vec() },
        Seq { len: x.len / 2, channels: x.channels, data: x.data[mid..].to_vec() },
    ))
}
