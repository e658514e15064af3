//! A small diffusion transformer over latent video tokens.
//!
//! Each block runs self-attention, then the blended global/location-aware
//! cross-attention, then a feed-forward layer; each sublayer input is layer
//! normalized and modulated by a scale/shift derived from the diffusion time.
//! Everything is `f64` with hand-derived backward passes.

mod checkpoint;
mod layers;
mod model;
mod params;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use model::{ConditionBundle, DitModel, ForwardCache, LocalCondition};
pub use params::{Block, DitParams, FeedForward, Linear};
pub use train::{
    condition_dropout, flow_matching_loss, flow_matching_loss_and_grad, full_model_grad_check, interpolate, AdamW,
    LossProbe, StepReport, TrainExample, TrainHyper, Trainable,
};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::GridShape;

/// A latent video, indexed `[t, row, col, channel]`.
pub type Volume = Array4<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    #[default]
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Patch extents `(t, h, w)`.
    pub patch: [usize; 3],
    pub channels: usize,
    /// Latent volume extents the model operates on.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub time_embed_dim: usize,
    pub ff_mult: usize,
    /// Blend between the global cross-attention and the LACA branch.
    pub lambda: f64,
    /// When false the LACA branch does not exist at all.
    pub laca_enabled: bool,
    pub pos_encoding: PosEncoding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 2,
            patch: [1, 2, 2],
            channels: 3,
            frames: 8,
            height: 16,
            width: 16,
            time_embed_dim: 32,
            ff_mult: 2,
            lambda: 0.5,
            laca_enabled: true,
            pos_encoding: PosEncoding::Sinusoidal,
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 {
            return Err(Error::InvalidParam(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.patch.contains(&0) || self.channels == 0 || self.time_embed_dim < 2 {
            return Err(Error::InvalidParam("patch, channels and time embedding must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParam(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        check_divisible([self.frames, self.height, self.width], self.patch)?;
        Ok(())
    }

    pub fn grid(&self) -> GridShape {
        GridShape::new(
            self.frames / self.patch[0],
            self.height / self.patch[1],
            self.width / self.patch[2],
        )
    }

    pub fn patch_len(&self) -> usize {
        self.patch.iter().product::<usize>() * self.channels
    }

    pub fn volume_shape(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }
}

fn check_divisible(extent: [usize; 3], patch: [usize; 3]) -> Result<()> {
    for (axis, (&n, &p)) in ["T", "H", "W"].iter().zip(extent.iter().zip(&patch)) {
        if p == 0 || n == 0 || n % p != 0 {
            return Err(Error::Shape(format!("{axis} = {n} not divisible by patch {p}")));
        }
    }
    Ok(())
}

/// Patch vectors of a latent volume in row-major `(t, row, col)` token order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenVolume {
    /// `L x (s_t * s_h * s_w * C)`.
    pub tokens: Array2<f64>,
    pub grid: GridShape,
    pub patch: [usize; 3],
    pub channels: usize,
}

impl TokenVolume {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }
}

/// Cuts a `T x H x W x C` volume into `THW / (s_t s_h s_w)` patches. Within a
/// patch the layout is `(dt, dh, dw, c)`.
pub fn patchify(x: &Volume, patch: [usize; 3]) -> Result<TokenVolume> {
    let (t, h, w, c) = x.dim();
    check_divisible([t, h, w], patch)?;
    let [pt, ph, pw] = patch;
    let grid = GridShape::new(t / pt, h / ph, w / pw);
    let plen = pt * ph * pw * c;
    let mut tokens = Array2::zeros((grid.len(), plen));
    for gt in 0..grid.t {
        for gi in 0..grid.h {
            for gj in 0..grid.w {
                let row = grid.index(gt, gi, gj);
                let mut k = 0;
                for dt in 0..pt {
                    for di in 0..ph {
                        for dj in 0..pw {
                            for ch in 0..c {
                                tokens[[row, k]] =
                                    x[[gt * pt + dt, gi * ph + di, gj * pw + dj, ch]];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(TokenVolume {
        tokens,
        grid,
        patch,
        channels: c,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify(tv: &TokenVolume) -> Result<Volume> {
    let [pt, ph, pw] = tv.patch;
    let c = tv.channels;
    let g = tv.grid;
    if tv.tokens.dim() != (g.len(), pt * ph * pw * c) {
        return Err(Error::Shape(format!(
            "token matrix {:?} does not match grid {g:?} with patch {:?}",
            tv.tokens.dim(),
            tv.patch
        )));
    }
    let mut x = Volume::zeros((g.t * pt, g.h * ph, g.w * pw, c));
    for gt in 0..g.t {
        for gi in 0..g.h {
            for gj in 0..g.w {
                let row = g.index(gt, gi, gj);
                let mut k = 0;
                for dt in 0..pt {
                    for di in 0..ph {
                        for dj in 0..pw {
                            for ch in 0..c {
                                x[[gt * pt + dt, gi * ph + di, gj * pw + dj, ch]] =
                                    tv.tokens[[row, k]];
                                k += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(x)
}
