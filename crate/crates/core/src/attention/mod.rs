//! Multi-head attention, the location-aware branch and their backward passes.
//!
//! Cross-attention and LACA share one row-wise kernel: every query row names a
//! key/value source and a scalar weight. Plain cross-attention is the special
//! case of one source at weight 1, which makes an all-global LACA bitwise
//! identical to cross-attention under the same weights. Self-attention uses a
//! dense matrix kernel instead.

mod gradcheck;
mod mha;

pub use gradcheck::{grad_check, relative_error, GradCheckable, REL_ERR_FLOOR};
pub use mha::{
    attend_dense, attend_dense_backward, attend_rows, attend_rows_backward, softmax_in_place,
    DenseCache, RowSource, RowsCache,
};

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::grounding::{conditioning_sources, AssignmentField, Cell};
use crate::trajectory::LocalText;

pub type Mat = Array2<f64>;

/// Query/key/value/output projections of one attention branch. Head `m` owns
/// columns `m*D_h .. (m+1)*D_h` of the query, key and value matrices. No biases.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            wq: Mat::zeros((dim, dim)),
            wk: Mat::zeros((dim, dim)),
            wv: Mat::zeros((dim, dim)),
            wo: Mat::zeros((dim, dim)),
            heads,
        }
    }

    /// Gaussian init with variance `1 / dim`.
    pub fn random<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Self {
        let n = Normal::new(0.0, (1.0 / dim as f64).sqrt()).expect("valid std");
        let mut m = || Mat::from_shape_fn((dim, dim), |_| n.sample(rng));
        Self {
            wq: m(),
            wk: m(),
            wv: m(),
            wo: m(),
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn check(&self) -> Result<()> {
        let d = self.dim();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::InvalidParam(format!(
                "width {d} not divisible into {} heads",
                self.heads
            )));
        }
        for (name, m) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)] {
            if m.dim() != (d, d) {
                return Err(shape_err(format!("{name} is {:?}, expected ({d}, {d})", m.dim())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("attention weight {name}")));
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, &Mat); 4] {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Mat); 4] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendConfig {
    pub lambda: f64,
}

impl BlendConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidParam(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(Self { lambda })
    }
}

/// `(1 - lambda) * cross + lambda * laca`. The endpoints return the matching
/// branch unchanged.
pub fn blend(cross_out: &Mat, laca_out: &Mat, cfg: BlendConfig) -> Result<Mat> {
    if cross_out.dim() != laca_out.dim() {
        return Err(shape_err(format!(
            "blend of {:?} and {:?}",
            cross_out.dim(),
            laca_out.dim()
        )));
    }
    let l = cfg.lambda;
    Ok(if l == 0.0 {
        cross_out.clone()
    } else if l == 1.0 {
        laca_out.clone()
    } else {
        cross_out * (1.0 - l) + laca_out * l
    })
}

fn check_width(z: &Mat, f: &Mat, w: &AttentionWeights) -> Result<()> {
    w.check()?;
    let d = w.dim();
    if z.ncols() != d || f.ncols() != d {
        return Err(shape_err(format!(
            "token width {} / text width {} vs model width {d}",
            z.ncols(),
            f.ncols()
        )));
    }
    if f.nrows() == 0 {
        return Err(shape_err("text feature has no tokens"));
    }
    Ok(())
}

/// Everything the backward pass of a row-sourced attention needs.
#[derive(Debug, Clone)]
pub struct RowAttnCache {
    pub z: Mat,
    /// Raw (unprojected) text features, one per source.
    pub features: Vec<Mat>,
    pub rows: RowsCache,
    pub hcat: Mat,
}

/// Standard multi-head cross-attention of tokens `z` over text `f`.
pub fn cross_attention(z: &Mat, f: &Mat, w: &AttentionWeights) -> Result<Mat> {
    Ok(cross_attention_fwd(z, f, w)?.0)
}

pub fn cross_attention_fwd(z: &Mat, f: &Mat, w: &AttentionWeights) -> Result<(Mat, RowAttnCache)> {
    check_width(z, f, w)?;
    let rows = vec![RowSource { source: 0, weight: 1.0 }; z.nrows()];
    row_attention_fwd(z, vec![f.clone()], rows, w)
}

/// Location-aware cross-attention: each token attends to its own source, the
/// weight-scaled local feature of its trajectory or the global feature.
pub fn laca(
    z: &Mat,
    field: &AssignmentField,
    locals: &[LocalText],
    global_feat: &Mat,
    w: &AttentionWeights,
) -> Result<Mat> {
    Ok(laca_fwd(z, field, locals, global_feat, w)?.0)
}

pub fn laca_fwd(
    z: &Mat,
    field: &AssignmentField,
    locals: &[LocalText],
    global_feat: &Mat,
    w: &AttentionWeights,
) -> Result<(Mat, RowAttnCache)> {
    check_width(z, global_feat, w)?;
    if field.shape().len() != z.nrows() {
        return Err(shape_err(format!(
            "assignment field has {} cells for {} tokens",
            field.shape().len(),
            z.nrows()
        )));
    }
    // validates feature presence for every referenced trajectory
    conditioning_sources(field, locals, global_feat)?;
    // source 0 is the global caption; source k+1 is trajectory k
    let mut features = vec![global_feat.clone()];
    for l in locals {
        let f = l
            .feature
            .clone()
            .unwrap_or_else(|| Mat::zeros((1, w.dim())));
        if f.ncols() != w.dim() || f.nrows() == 0 {
            return Err(shape_err(format!("local text `{}` feature is {:?}", l.id, f.dim())));
        }
        features.push(f);
    }
    let rows = field
        .cells()
        .iter()
        .map(|c| match *c {
            Cell::Global => RowSource { source: 0, weight: 1.0 },
            Cell::Local { traj, weight } => RowSource {
                source: traj + 1,
                weight,
            },
        })
        .collect();
    row_attention_fwd(z, features, rows, w)
}

fn row_attention_fwd(
    z: &Mat,
    features: Vec<Mat>,
    rows: Vec<RowSource>,
    w: &AttentionWeights,
) -> Result<(Mat, RowAttnCache)> {
    let q = z.dot(&w.wq);
    let kv: Vec<(Mat, Mat)> = features
        .iter()
        .map(|f| (f.dot(&w.wk), f.dot(&w.wv)))
        .collect();
    let (hcat, rows_cache) = attend_rows(q, kv, rows, w.heads);
    let out = hcat.dot(&w.wo);
    Ok((
        out,
        RowAttnCache {
            z: z.clone(),
            features,
            rows: rows_cache,
            hcat,
        },
    ))
}

/// Gradients of a row-sourced attention with respect to its weights, its
/// token input and each text feature.
#[derive(Debug, Clone)]
pub struct RowAttnGrads {
    pub weights: AttentionWeights,
    pub dz: Mat,
    pub dfeatures: Vec<Mat>,
}

pub fn row_attention_backward(
    cache: &RowAttnCache,
    w: &AttentionWeights,
    dout: &Mat,
) -> RowAttnGrads {
    let dwo = cache.hcat.t().dot(dout);
    let dhcat = dout.dot(&w.wo.t());
    let (dq, dkv) = attend_rows_backward(&cache.rows, &dhcat);
    let dwq = cache.z.t().dot(&dq);
    let dz = dq.dot(&w.wq.t());
    let d = w.dim();
    let mut dwk = Mat::zeros((d, d));
    let mut dwv = Mat::zeros((d, d));
    let mut dfeatures = Vec::with_capacity(cache.features.len());
    for (f, (dk, dv)) in cache.features.iter().zip(dkv) {
        dwk += &f.t().dot(&dk);
        dwv += &f.t().dot(&dv);
        dfeatures.push(dk.dot(&w.wk.t()) + dv.dot(&w.wv.t()));
    }
    RowAttnGrads {
        weights: AttentionWeights {
            wq: dwq,
            wk: dwk,
            wv: dwv,
            wo: dwo,
            heads: w.heads,
        },
        dz,
        dfeatures,
    }
}

/// Dense self-attention cache.
#[derive(Debug, Clone)]
pub struct SelfAttnCache {
    pub z: Mat,
    pub dense: DenseCache,
    pub hcat: Mat,
}

pub fn self_attention_fwd(z: &Mat, w: &AttentionWeights) -> Result<(Mat, SelfAttnCache)> {
    check_width(z, z, w)?;
    let q = z.dot(&w.wq);
    let k = z.dot(&w.wk);
    let v = z.dot(&w.wv);
    let (hcat, dense) = attend_dense(q, k, v, w.heads);
    let out = hcat.dot(&w.wo);
    Ok((
        out,
        SelfAttnCache {
            z: z.clone(),
            dense,
            hcat,
        },
    ))
}

/// Returns weight gradients and the gradient with respect to the input.
pub fn self_attention_backward(
    cache: &SelfAttnCache,
    w: &AttentionWeights,
    dout: &Mat,
) -> (AttentionWeights, Mat) {
    let dwo = cache.hcat.t().dot(dout);
    let dhcat = dout.dot(&w.wo.t());
    let (dq, dk, dv) = attend_dense_backward(&cache.dense, &dhcat);
    let z = &cache.z;
    let dz = dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    (
        AttentionWeights {
            wq: z.t().dot(&dq),
            wk: z.t().dot(&dk),
            wv: z.t().dot(&dv),
            wo: dwo,
            heads: w.heads,
        },
        dz,
    )
}

/// Per-head attention probabilities for query `row` (cross/LACA).
pub fn row_probs(cache: &RowAttnCache, row: usize, head: usize) -> &[f64] {
    cache.rows.probs(row, head)
}

/// Copies head `m`'s slice of a `L x D` matrix.
pub(crate) fn head_slice(m: &Mat, head: usize, dh: usize) -> Mat {
    m.slice(s![.., head * dh..(head + 1) * dh]).to_owned()
}

#[cfg(test)]
mod tests;
