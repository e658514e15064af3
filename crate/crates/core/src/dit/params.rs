use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::attention::{AttentionWeights, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in x out`.
    pub w: Mat,
    /// `1 x out`.
    pub b: Mat,
}

impl Linear {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            w: Mat::zeros((inp, out)),
            b: Mat::zeros((1, out)),
        }
    }

    fn normal<R: Rng>(inp: usize, out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w: gaussian((inp, out), std, rng),
            b: Mat::zeros((1, out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// Time conditioning to six `1 x D` chunks: shift/scale for each sublayer.
    pub modulation: Linear,
    pub self_attn: AttentionWeights,
    pub cross: AttentionWeights,
    /// `None` when the location-aware branch is removed.
    pub laca: Option<AttentionWeights>,
    pub ff: FeedForward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DitParams {
    pub embed: Linear,
    pub time1: Linear,
    pub time2: Linear,
    /// Stand-in for the global caption when it is dropped.
    pub null_global: Mat,
    pub blocks: Vec<Block>,
    /// Time conditioning to the output shift/scale.
    pub final_mod: Linear,
    pub head: Linear,
}

pub(crate) fn gaussian<R: Rng>(shape: (usize, usize), std: f64, rng: &mut R) -> Mat {
    let n = Normal::new(0.0, std).expect("valid std");
    Mat::from_shape_fn(shape, |_| n.sample(rng))
}

impl DitParams {
    /// Training init: modulation, output head and the LACA output
    /// projection start at zero.
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.dim;
        let e = cfg.time_embed_dim;
        let p = cfg.patch_len();
        let hidden = cfg.ff_mult * d;
        let inv = |n: usize| (1.0 / n as f64).sqrt();
        let blocks = (0..cfg.depth)
            .map(|_| {
                let mut laca = AttentionWeights::random(d, cfg.heads, rng);
                laca.wo.fill(0.0);
                Block {
                    modulation: Linear::zeros(d, 6 * d),
                    self_attn: AttentionWeights::random(d, cfg.heads, rng),
                    cross: AttentionWeights::random(d, cfg.heads, rng),
                    laca: cfg.laca_enabled.then_some(laca),
                    ff: FeedForward {
                        fc1: Linear::normal(d, hidden, inv(d), rng),
                        fc2: Linear::normal(hidden, d, inv(hidden), rng),
                    },
                }
            })
            .collect();
        Self {
            embed: Linear::normal(p, d, inv(p), rng),
            time1: Linear::normal(e, d, inv(e), rng),
            time2: Linear::normal(d, d, inv(d), rng),
            null_global: gaussian((1, d), 1.0, rng),
            blocks,
            final_mod: Linear::zeros(d, 2 * d),
            head: Linear::zeros(d, p),
        }
    }

    /// Every tensor drawn at random, biases included. Used where all paths
    /// must carry gradient, e.g. finite-difference checks.
    pub fn randomized<R: Rng>(cfg: &ModelConfig, std: f64, rng: &mut R) -> Self {
        let mut p = Self::init(cfg, rng);
        for (_, m) in p.named_mut() {
            let fresh = gaussian(m.dim(), std, rng);
            m.assign(&fresh);
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.named_mut() {
            m.fill(0.0);
        }
        z
    }

    /// Named tensors in a fixed order.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = Vec::new();
        push_linear(&mut out, "embed", &self.embed);
        push_linear(&mut out, "time1", &self.time1);
        push_linear(&mut out, "time2", &self.time2);
        out.push(("null_global".into(), &self.null_global));
        for (i, b) in self.blocks.iter().enumerate() {
            push_linear(&mut out, &format!("blocks.{i}.modulation"), &b.modulation);
            push_attn(&mut out, &format!("blocks.{i}.self"), &b.self_attn);
            push_attn(&mut out, &format!("blocks.{i}.cross"), &b.cross);
            if let Some(l) = &b.laca {
                push_attn(&mut out, &format!("blocks.{i}.laca"), l);
            }
            push_linear(&mut out, &format!("blocks.{i}.ff.fc1"), &b.ff.fc1);
            push_linear(&mut out, &format!("blocks.{i}.ff.fc2"), &b.ff.fc2);
        }
        push_linear(&mut out, "final_mod", &self.final_mod);
        push_linear(&mut out, "head", &self.head);
        out
    }

    /// Same order as [`DitParams::named`].
    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = Vec::new();
        push_linear_mut(&mut out, "embed", &mut self.embed);
        push_linear_mut(&mut out, "time1", &mut self.time1);
        push_linear_mut(&mut out, "time2", &mut self.time2);
        out.push(("null_global".into(), &mut self.null_global));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            push_linear_mut(&mut out, &format!("blocks.{i}.modulation"), &mut b.modulation);
            push_attn_mut(&mut out, &format!("blocks.{i}.self"), &mut b.self_attn);
            push_attn_mut(&mut out, &format!("blocks.{i}.cross"), &mut b.cross);
            if let Some(l) = &mut b.laca {
                push_attn_mut(&mut out, &format!("blocks.{i}.laca"), l);
            }
            push_linear_mut(&mut out, &format!("blocks.{i}.ff.fc1"), &mut b.ff.fc1);
            push_linear_mut(&mut out, &format!("blocks.{i}.ff.fc2"), &mut b.ff.fc2);
        }
        push_linear_mut(&mut out, "final_mod", &mut self.final_mod);
        push_linear_mut(&mut out, "head", &mut self.head);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Mat)>, prefix: &str, l: &'a Linear) {
    out.push((format!("{prefix}.w"), &l.w));
    out.push((format!("{prefix}.b"), &l.b));
}

fn push_attn<'a>(out: &mut Vec<(String, &'a Mat)>, prefix: &str, a: &'a AttentionWeights) {
    for (n, m) in a.named() {
        out.push((format!("{prefix}.{n}"), m));
    }
}

fn push_linear_mut<'a>(out: &mut Vec<(String, &'a mut Mat)>, prefix: &str, l: &'a mut Linear) {
    out.push((format!("{prefix}.w"), &mut l.w));
    out.push((format!("{prefix}.b"), &mut l.b));
}

fn push_attn_mut<'a>(
    out: &mut Vec<(String, &'a mut Mat)>,
    prefix: &str,
    a: &'a mut AttentionWeights,
) {
    for (n, m) in a.named_mut() {
        out.push((format!("{prefix}.{n}"), m));
    }
}
