use ndarray::{s, Array2, Axis};

use crate::attention::Mat;

pub(crate) const LN_EPS: f64 = 1e-6;

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: &Mat) -> Mat {
    x.mapv(|v| v * sigmoid(v))
}

/// `dy * silu'(x)`.
pub(crate) fn silu_backward(x: &Mat, dy: &Mat) -> Mat {
    let mut out = dy.clone();
    out.zip_mut_with(x, |d, &v| {
        let s = sigmoid(v);
        *d *= s * (1.0 + v * (1.0 - s));
    });
    out
}

/// `x W + b`, with `b` broadcast over rows.
pub(crate) fn affine(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    x.dot(w) + b
}

pub(crate) fn col_sum(x: &Mat) -> Mat {
    x.sum_axis(Axis(0)).insert_axis(Axis(0))
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    pub normed: Mat,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer norm without affine parameters.
pub(crate) fn layer_norm(x: &Mat) -> LnCache {
    let d = x.ncols() as f64;
    let mut normed = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in normed.rows_mut() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * inv);
        inv_std.push(inv);
    }
    LnCache { normed, inv_std }
}

pub(crate) fn layer_norm_backward(cache: &LnCache, dn: &Mat) -> Mat {
    let d = dn.ncols() as f64;
    let mut dx = dn.clone();
    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
        let n = cache.normed.row(r);
        let mean_dn = row.sum() / d;
        let mean_dn_n = row.iter().zip(n.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        let inv = cache.inv_std[r];
        for (v, nv) in row.iter_mut().zip(n.iter()) {
            *v = inv * (*v - mean_dn - nv * mean_dn_n);
        }
    }
    dx
}

/// `n * (1 + scale) + shift` with `1 x D` scale and shift.
pub(crate) fn modulate(n: &Mat, shift: &Mat, scale: &Mat) -> Mat {
    n * &scale.mapv(|v| 1.0 + v) + shift
}

/// Returns `(dn, dshift, dscale)`.
pub(crate) fn modulate_backward(n: &Mat, scale: &Mat, da: &Mat) -> (Mat, Mat, Mat) {
    let dn = da * &scale.mapv(|v| 1.0 + v);
    let dshift = col_sum(da);
    let dscale = col_sum(&(da * n));
    (dn, dshift, dscale)
}

/// Column block `k` of width `d` from a `1 x (n d)` row.
pub(crate) fn chunk(m: &Mat, k: usize, d: usize) -> Mat {
    m.slice(s![.., k * d..(k + 1) * d]).to_owned()
}

pub(crate) fn set_chunk(m: &mut Mat, k: usize, d: usize, v: &Mat) {
    m.slice_mut(s![.., k * d..(k + 1) * d]).assign(v);
}

/// Sinusoidal embedding of a scalar: `[sin(p w_k)..., cos(p w_k)...]`.
pub(crate) fn scalar_embedding(p: f64, width: usize) -> Mat {
    let half = width / 2;
    let mut out = Array2::zeros((1, width));
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        out[[0, k]] = (p * freq).sin();
        out[[0, half + k]] = (p * freq).cos();
    }
    out
}

/// Fixed sinusoidal encoding of `(t, row, col)` token positions.
pub(crate) fn position_table(t: usize, h: usize, w: usize, dim: usize) -> Mat {
    let pt = 2 * (dim / 6);
    let pi = 2 * ((dim - pt) / 4);
    let pj = dim - pt - pi;
    let mut table = Array2::zeros((t * h * w, dim));
    let fill = |row: &mut ndarray::ArrayViewMut1<f64>, offset: usize, n: usize, pos: f64| {
        for k in 0..n / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * k as f64 / n as f64);
            row[offset + 2 * k] = (pos * freq).sin();
            row[offset + 2 * k + 1] = (pos * freq).cos();
        }
    };
    for a in 0..t {
        for b in 0..h {
            for c in 0..w {
                let idx = (a * h + b) * w + c;
                let mut row = table.row_mut(idx);
                fill(&mut row, 0, pt, a as f64);
                fill(&mut row, pt, pi, b as f64);
                fill(&mut row, pt + pi, pj, c as f64);
            }
        }
    }
    table
}
