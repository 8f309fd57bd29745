use super::Tensor;
use crate::error::{check_len, Error, Result};

fn dense_dims(w: &Tensor) -> Result<(usize, usize)> {
    match w.shape[..] {
        [out, inp] => Ok((out, inp)),
        _ => Err(Error::InvalidArgument(format!("dense weight must be [out, in], got {:?}", w.shape))),
    }
}

/// Affine map `W x + b` with `W` stored `[out, in]`.
pub fn dense(x: &[f64], weight: &Tensor, bias: &[f64]) -> Result<Vec<f64>> {
    let (n_out, n_in) = dense_dims(weight)?;
    check_len("dense input", n_in, x.len())?;
    check_len("dense bias", n_out, bias.len())?;
    Ok((0..n_out)
        .map(|o| {
            let row = &weight.data[o * n_in..(o + 1) * n_in];
            bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
        .collect())
}

/// Backward of [`dense`]: `(grad_x, grad_weight, grad_bias)`.
pub fn dense_backward(x: &[f64], weight: &Tensor, grad_out: &[f64]) -> Result<(Vec<f64>, Tensor, Vec<f64>)> {
    let (n_out, n_in) = dense_dims(weight)?;
    check_len("dense input", n_in, x.len())?;
    check_len("dense grad", n_out, grad_out.len())?;
    let mut gx = vec![0.0; n_in];
    let mut gw = Tensor::zeros(&weight.shape);
    for (o, &g) in grad_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &weight.data[o * n_in..(o + 1) * n_in];
        let grow = &mut gw.data[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            grow[i] = g * x[i];
            gx[i] += g * row[i];
        }
    }
    Ok((gx, gw, grad_out.to_vec()))
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

/// Passes the gradient where the pre-activation was positive.
pub fn relu_backward(pre: &[f64], grad_out: &[f64]) -> Vec<f64> {
    pre.iter().zip(grad_out).map(|(p, g)| if *p > 0.0 { *g } else { 0.0 }).collect()
}
