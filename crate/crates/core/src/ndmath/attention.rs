use super::{Grid, Mat, Seq};
use crate::bucketing::Axis;
use crate::error::{check_len, Error, Result};

/// Softmax of `logits` along `axis`.
///
/// `Axis::Y` normalizes every column over its rows; `Axis::X` normalizes
/// every row over its columns. Max-subtracted for stability.
pub fn softmax_along(axis: Axis, logits: &Mat) -> Mat {
    let mut out = Mat::zeros(logits.rows, logits.cols);
    let (groups, members) = group_dims(axis, logits);
    for g in 0..groups {
        let at = |m: usize| flat(axis, logits, g, m);
        let max = (0..members).map(|m| logits.data[at(m)]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for m in 0..members {
            let e = (logits.data[at(m)] - max).exp();
            out.data[at(m)] = e;
            sum += e;
        }
        for m in 0..members {
            out.data[at(m)] /= sum;
        }
    }
    out
}

/// Gradient of a softmax w.r.t. its logits, given the softmax output.
pub fn softmax_along_backward(axis: Axis, out: &Mat, grad_out: &Mat) -> Mat {
    let mut g_in = Mat::zeros(out.rows, out.cols);
    let (groups, members) = group_dims(axis, out);
    for g in 0..groups {
        let dot: f64 = (0..members)
            .map(|m| {
                let i = flat(axis, out, g, m);
                out.data[i] * grad_out.data[i]
            })
            .sum();
        for m in 0..members {
            let i = flat(axis, out, g, m);
            g_in.data[i] = out.data[i] * (grad_out.data[i] - dot);
        }
    }
    g_in
}

fn group_dims(axis: Axis, m: &Mat) -> (usize, usize) {
    match axis {
        Axis::Y => (m.cols, m.rows),
        Axis::X => (m.rows, m.cols),
    }
}

#[inline]
fn flat(axis: Axis, m: &Mat, group: usize, member: usize) -> usize {
    match axis {
        Axis::Y => member * m.cols + group,
        Axis::X => group * m.cols + member,
    }
}

/// Attention maps for the X and Y aggregations.
///
/// `mx` sums to one down every column; `my` sums to one along every row.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPair {
    pub mx: Mat,
    pub my: Mat,
}

impl AttentionPair {
    pub fn from_logits(lx: &Mat, ly: &Mat) -> Self {
        Self { mx: softmax_along(Axis::Y, lx), my: softmax_along(Axis::X, ly) }
    }

    /// Uniform attention over a `k x k` map.
    pub fn uniform(k: usize) -> Self {
        let v = 1.0 / k as f64;
        Self { mx: Mat { rows: k, cols: k, data: vec![v; k * k] }, my: Mat { rows: k, cols: k, data: vec![v; k * k] } }
    }

    /// Largest deviation of a column sum of `mx` or a row sum of `my` from 1.
    pub fn normalization_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for x in 0..self.mx.cols {
            let s: f64 = (0..self.mx.rows).map(|y| self.mx.at(y, x)).sum();
            worst = worst.max((s - 1.0).abs());
        }
        for y in 0..self.my.rows {
            let s: f64 = (0..self.my.cols).map(|x| self.my.at(y, x)).sum();
            worst = worst.max((s - 1.0).abs());
        }
        worst
    }
}

fn check_att(f: &Grid, att: &AttentionPair) -> Result<()> {
    for m in [&att.mx, &att.my] {
        check_len("attention rows", f.height, m.rows)?;
        check_len("attention cols", f.width, m.cols)?;
    }
    Ok(())
}

/// Attention-weighted aggregation of a grid into a horizontal and a vertical
/// 1-D feature.
///
/// `fx[x][c] = sum_y f[y][x][c] * mx[y][x]` (length `width`) and
/// `fy[y][c] = sum_x f[y][x][c] * my[y][x]` (length `height`).
pub fn aggregate(f: &Grid, att: &AttentionPair) -> Result<(Seq, Seq)> {
    check_att(f, att)?;
    let c = f.channels;
    let mut fx = Seq::zeros(f.width, c);
    let mut fy = Seq::zeros(f.height, c);
    for y in 0..f.height {
        for x in 0..f.width {
            let wx = att.mx.at(y, x);
            let wy = att.my.at(y, x);
            let px = f.pixel(y, x);
            let rx = fx.row_mut(x);
            for ch in 0..c {
                rx[ch] += px[ch] * wx;
            }
            let ry = fy.row_mut(y);
            for ch in 0..c {
                ry[ch] += px[ch] * wy;
            }
        }
    }
    Ok((fx, fy))
}

/// Backward of [`aggregate`]: gradients w.r.t. the grid and both maps.
pub fn aggregate_backward(f: &Grid, att: &AttentionPair, g_fx: &Seq, g_fy: &Seq) -> Result<(Grid, Mat, Mat)> {
    check_att(f, att)?;
    if g_fx.len != f.width || g_fy.len != f.height || g_fx.channels != f.channels || g_fy.channels != f.channels {
        return Err(Error::InvalidArgument("aggregate gradient shape mismatch".into()));
    }
    let mut g_f = Grid::zeros(f.height, f.width, f.channels);
    let mut g_mx = Mat::zeros(f.height, f.width);
    let mut g_my = Mat::zeros(f.height, f.width);
    for y in 0..f.height {
        for x in 0..f.width {
            let wx = att.mx.at(y, x);
            let wy = att.my.at(y, x);
            let gx = g_fx.row(x);
            let gy = g_fy.row(y);
            let mut sx = 0.0;
            let mut sy = 0.0;
            for ch in 0..f.channels {
                let v = f.at(y, x, ch);
                *g_f.at_mut(y, x, ch) = gx[ch] * wx + gy[ch] * wy;
                sx += v * gx[ch];
                sy += v * gy[ch];
            }
            *g_mx.at_mut(y, x) = sx;
            *g_my.at_mut(y, x) = sy;
        }
    }
    Ok((g_f, g_mx, g_my))
}
