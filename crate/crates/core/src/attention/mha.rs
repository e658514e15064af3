use ndarray::{s, Array2, Axis};

use super::{head_slice, Mat};

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Key/value source selection for one query row. The source's keys and values
/// are multiplied by `weight` before use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowSource {
    pub source: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct RowsCache {
    q: Mat,
    kv: Vec<(Mat, Mat)>,
    rows: Vec<RowSource>,
    heads: usize,
    /// Probabilities of row `r`, head `m` live at
    /// `offsets[r] + m * len(source) ..`.
    probs: Vec<f64>,
    offsets: Vec<usize>,
}

impl RowsCache {
    pub fn probs(&self, row: usize, head: usize) -> &[f64] {
        let lt = self.kv[self.rows[row].source].0.nrows();
        let start = self.offsets[row] + head * lt;
        &self.probs[start..start + lt]
    }
}

/// Row-wise multi-head attention. `q` is `L x D`; each `kv` entry is a
/// `(keys, values)` pair of shape `L_text x D`. Returns the concatenated head
/// outputs (`L x D`).
pub fn attend_rows(
    q: Mat,
    kv: Vec<(Mat, Mat)>,
    rows: Vec<RowSource>,
    heads: usize,
) -> (Mat, RowsCache) {
    let (l, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros((l, d));
    let mut probs = Vec::new();
    let mut offsets = Vec::with_capacity(l);
    let mut logits = Vec::new();
    for (r, src) in rows.iter().enumerate() {
        let (k, v) = &kv[src.source];
        let g = src.weight;
        let lt = k.nrows();
        offsets.push(probs.len());
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            logits.clear();
            for j in 0..lt {
                let mut acc = 0.0;
                for c in cols.clone() {
                    acc += q[[r, c]] * (g * k[[j, c]]);
                }
                logits.push(acc * scale);
            }
            softmax_in_place(&mut logits);
            for c in cols.clone() {
                let mut acc = 0.0;
                for (j, p) in logits.iter().enumerate() {
                    acc += p * (g * v[[j, c]]);
                }
                out[[r, c]] = acc;
            }
            probs.extend_from_slice(&logits);
        }
    }
    (
        out,
        RowsCache {
            q,
            kv,
            rows,
            heads,
            probs,
            offsets,
        },
    )
}

/// Backward of [`attend_rows`]: returns `dq` and per-source `(dk, dv)`.
pub fn attend_rows_backward(cache: &RowsCache, dh_out: &Mat) -> (Mat, Vec<(Mat, Mat)>) {
    let q = &cache.q;
    let (_, d) = q.dim();
    let dh = d / cache.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(q.dim());
    let mut dkv: Vec<(Mat, Mat)> = cache
        .kv
        .iter()
        .map(|(k, v)| (Mat::zeros(k.dim()), Mat::zeros(v.dim())))
        .collect();
    let mut dp = Vec::new();
    for (r, src) in cache.rows.iter().enumerate() {
        let (k, v) = &cache.kv[src.source];
        let (dk, dv) = &mut dkv[src.source];
        let g = src.weight;
        let lt = k.nrows();
        for h in 0..cache.heads {
            let cols = h * dh..(h + 1) * dh;
            let p = cache.probs(r, h);
            dp.clear();
            for j in 0..lt {
                let mut acc = 0.0;
                for c in cols.clone() {
                    acc += dh_out[[r, c]] * (g * v[[j, c]]);
                }
                dp.push(acc);
            }
            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..lt {
                let ds = p[j] * (dp[j] - dot) * scale;
                for c in cols.clone() {
                    dq[[r, c]] += ds * g * k[[j, c]];
                    dk[[j, c]] += ds * q[[r, c]] * g;
                    dv[[j, c]] += p[j] * dh_out[[r, c]] * g;
                }
            }
        }
    }
    (dq, dkv)
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    q: Mat,
    k: Mat,
    v: Mat,
    heads: usize,
    /// One `L x L` probability matrix per head.
    pub probs: Vec<Mat>,
}

/// Dense multi-head attention where every query sees every key.
pub fn attend_dense(q: Mat, k: Mat, v: Mat, heads: usize) -> (Mat, DenseCache) {
    let (l, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros((l, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = head_slice(&q, h, dh);
        let kh = head_slice(&k, h, dh);
        let vh = head_slice(&v, h, dh);
        let mut p = qh.dot(&kh.t()) * scale;
        for mut row in p.axis_iter_mut(Axis(0)) {
            softmax_in_place(row.as_slice_mut().expect("standard layout"));
        }
        out.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.dot(&vh));
        probs.push(p);
    }
    (
        out,
        DenseCache {
            q,
            k,
            v,
            heads,
            probs,
        },
    )
}

/// Backward of [`attend_dense`]: returns `(dq, dk, dv)`.
pub fn attend_dense_backward(cache: &DenseCache, dh_out: &Mat) -> (Mat, Mat, Mat) {
    let (l, d) = cache.q.dim();
    let dh = d / cache.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros((l, d));
    let mut dk = Mat::zeros(cache.k.dim());
    let mut dv = Mat::zeros(cache.v.dim());
    for h in 0..cache.heads {
        let p = &cache.probs[h];
        let qh = head_slice(&cache.q, h, dh);
        let kh = head_slice(&cache.k, h, dh);
        let vh = head_slice(&cache.v, h, dh);
        let dho = head_slice(dh_out, h, dh);
        let dp = dho.dot(&vh.t());
        let row_dot = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds: Array2<f64> = p * &(dp - &row_dot) * scale;
        dq.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.dot(&kh));
        dk.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&ds.t().dot(&qh));
        dv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&p.t().dot(&dho));
    }
    (dq, dk, dv)
}
