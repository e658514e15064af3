use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    affine, chunk, col_sum, layer_norm, layer_norm_backward, modulate, modulate_backward,
    position_table, scalar_embedding, set_chunk, silu, silu_backward, LnCache,
};
use super::params::DitParams;
use super::{patchify, unpatchify, ModelConfig, TokenVolume, Volume};
use crate::attention::{
    blend, cross_attention_fwd, laca_fwd, row_attention_backward, self_attention_backward,
    self_attention_fwd, AttentionWeights, BlendConfig, Mat, RowAttnCache, SelfAttnCache,
};
use crate::error::{Error, Result};
use crate::grounding::AssignmentField;
use crate::trajectory::LocalText;

/// Local texts (with features) and the field that routes tokens to them.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalCondition {
    pub texts: Vec<LocalText>,
    pub field: AssignmentField,
}

/// The conditions of one forward pass. A missing component is the null
/// condition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConditionBundle {
    pub global: Option<Mat>,
    pub locals: Option<LocalCondition>,
}

impl ConditionBundle {
    pub fn null() -> Self {
        Self::default()
    }

    pub fn global_only(&self) -> Self {
        Self {
            global: self.global.clone(),
            locals: None,
        }
    }

    pub fn locals_only(&self) -> Self {
        Self {
            global: None,
            locals: self.locals.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DitModel {
    cfg: ModelConfig,
    pub params: DitParams,
    positions: Mat,
}

#[derive(Debug, Clone)]
struct BlockCache {
    mods: Mat,
    ln1: LnCache,
    self_c: SelfAttnCache,
    ln2: LnCache,
    cross_c: RowAttnCache,
    laca_c: Option<RowAttnCache>,
    ln3: LnCache,
    ff_in: Mat,
    ff_pre: Mat,
    ff_act: Mat,
}

/// Activations retained for [`DitModel::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    patches: Mat,
    time_sin: Mat,
    time_pre: Mat,
    temb: Mat,
    ctx: Mat,
    global_is_null: bool,
    blocks: Vec<BlockCache>,
    final_mods: Mat,
    final_ln: LnCache,
    final_in: Mat,
    grid: crate::grounding::GridShape,
}

impl DitModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = DitParams::init(&cfg, &mut rng);
        Ok(Self::from_params(cfg, params))
    }

    /// All tensors random, for gradient checks.
    pub fn new_randomized(cfg: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        cfg.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = DitParams::randomized(&cfg, std, &mut rng);
        Ok(Self::from_params(cfg, params))
    }

    pub fn from_params(cfg: ModelConfig, params: DitParams) -> Self {
        let g = cfg.grid();
        let positions = position_table(g.t, g.h, g.w, cfg.dim);
        Self {
            cfg,
            params,
            positions,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        BlendConfig::new(lambda)?;
        self.cfg.lambda = lambda;
        Ok(())
    }

    /// Drops the LACA branch entirely.
    pub fn without_laca(&self) -> Self {
        let mut m = self.clone();
        m.cfg.laca_enabled = false;
        for b in &mut m.params.blocks {
            b.laca = None;
        }
        m
    }

    pub fn check_condition(&self, cond: &ConditionBundle) -> Result<()> {
        let d = self.cfg.dim;
        if let Some(g) = &cond.global {
            if g.ncols() != d || g.nrows() == 0 {
                return Err(Error::Shape(format!("global feature {:?}, width {d} expected", g.dim())));
            }
        }
        if let Some(l) = &cond.locals {
            if l.field.shape() != self.cfg.grid() {
                return Err(Error::Shape(format!(
                    "condition grid {:?} does not match model grid {:?}",
                    l.field.shape(),
                    self.cfg.grid()
                )));
            }
            for t in &l.texts {
                t.check_width(d)?;
            }
        }
        Ok(())
    }

    /// Predicted velocity at `(x_t, t)` under `cond`.
    pub fn forward(&self, x: &Volume, t: f64, cond: &ConditionBundle) -> Result<Volume> {
        Ok(self.forward_train(x, t, cond)?.0)
    }

    pub fn forward_train(
        &self,
        x: &Volume,
        t: f64,
        cond: &ConditionBundle,
    ) -> Result<(Volume, ForwardCache)> {
        let cfg = &self.cfg;
        if x.dim() != cfg.volume_shape() {
            return Err(Error::Shape(format!(
                "input volume {:?}, model expects {:?}",
                x.dim(),
                cfg.volume_shape()
            )));
        }
        self.check_condition(cond)?;
        let p = &self.params;
        let d = cfg.dim;
        let tv = patchify(x, cfg.patch)?;
        let patches = tv.tokens;
        let mut z = affine(&patches, &p.embed.w, &p.embed.b) + &self.positions;

        let time_sin = scalar_embedding(1000.0 * t, cfg.time_embed_dim);
        let time_pre = affine(&time_sin, &p.time1.w, &p.time1.b);
        let temb = affine(&silu(&time_pre), &p.time2.w, &p.time2.b);
        let ctx = silu(&temb);

        let global_is_null = cond.global.is_none();
        let global = cond.global.as_ref().unwrap_or(&p.null_global);
        let blend_cfg = BlendConfig::new(cfg.lambda)?;

        let mut blocks = Vec::with_capacity(p.blocks.len());
        for b in &p.blocks {
            let mods = affine(&ctx, &b.modulation.w, &b.modulation.b);

            let ln1 = layer_norm(&z);
            let a = modulate(&ln1.normed, &chunk(&mods, 0, d), &chunk(&mods, 1, d));
            let (sa, self_c) = self_attention_fwd(&a, &b.self_attn)?;
            z += &sa;

            let ln2 = layer_norm(&z);
            let bb = modulate(&ln2.normed, &chunk(&mods, 2, d), &chunk(&mods, 3, d));
            let (cross, cross_c) = cross_attention_fwd(&bb, global, &b.cross)?;
            let (update, laca_c) = match &b.laca {
                Some(lw) if cfg.laca_enabled && blend_cfg.lambda > 0.0 => {
                    let (lo, lc) = run_laca(&bb, cond, global, lw, cfg)?;
                    (blend(&cross, &lo, blend_cfg)?, Some(lc))
                }
                _ => (cross, None),
            };
            z += &update;

            let ln3 = layer_norm(&z);
            let ff_in = modulate(&ln3.normed, &chunk(&mods, 4, d), &chunk(&mods, 5, d));
            let ff_pre = affine(&ff_in, &b.ff.fc1.w, &b.ff.fc1.b);
            let ff_act = silu(&ff_pre);
            z += &affine(&ff_act, &b.ff.fc2.w, &b.ff.fc2.b);

            blocks.push(BlockCache {
                mods,
                ln1,
                self_c,
                ln2,
                cross_c,
                laca_c,
                ln3,
                ff_in,
                ff_pre,
                ff_act,
            });
        }

        let final_mods = affine(&ctx, &p.final_mod.w, &p.final_mod.b);
        let final_ln = layer_norm(&z);
        let final_in = modulate(&final_ln.normed, &chunk(&final_mods, 0, d), &chunk(&final_mods, 1, d));
        let out_tokens = affine(&final_in, &p.head.w, &p.head.b);
        if out_tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model output".into()));
        }
        let out = unpatchify(&TokenVolume {
            tokens: out_tokens,
            grid: tv.grid,
            patch: cfg.patch,
            channels: cfg.channels,
        })?;
        Ok((
            out,
            ForwardCache {
                patches,
                time_sin,
                time_pre,
                temb,
                ctx,
                global_is_null,
                blocks,
                final_mods,
                final_ln,
                final_in,
                grid: tv.grid,
            },
        ))
    }

    /// Parameter gradients of `sum(dout * output)`.
    pub fn backward(&self, cache: &ForwardCache, dout: &Volume) -> Result<DitParams> {
        let cfg = &self.cfg;
        let p = &self.params;
        let d = cfg.dim;
        let mut g = p.zeros_like();
        let dtokens = patchify(dout, cfg.patch)?.tokens;

        g.head.w = cache.final_in.t().dot(&dtokens);
        g.head.b = col_sum(&dtokens);
        let dfinal_in = dtokens.dot(&p.head.w.t());
        let (dn, dshift, dscale) =
            modulate_backward(&cache.final_ln.normed, &chunk(&cache.final_mods, 1, d), &dfinal_in);
        let mut dfmods = Mat::zeros((1, 2 * d));
        set_chunk(&mut dfmods, 0, d, &dshift);
        set_chunk(&mut dfmods, 1, d, &dscale);
        g.final_mod.w = cache.ctx.t().dot(&dfmods);
        g.final_mod.b = dfmods.clone();
        let mut dctx = dfmods.dot(&p.final_mod.w.t());
        let mut dz = layer_norm_backward(&cache.final_ln, &dn);
        let mut dglobal: Option<Mat> = None;

        for (bi, (b, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut g.blocks[bi];
            let mut dmods = Mat::zeros((1, 6 * d));

            // feed-forward
            gb.ff.fc2.w = bc.ff_act.t().dot(&dz);
            gb.ff.fc2.b = col_sum(&dz);
            let dact = dz.dot(&b.ff.fc2.w.t());
            let dpre = silu_backward(&bc.ff_pre, &dact);
            gb.ff.fc1.w = bc.ff_in.t().dot(&dpre);
            gb.ff.fc1.b = col_sum(&dpre);
            let dff_in = dpre.dot(&b.ff.fc1.w.t());
            let (dn3, dsh, dsc) = modulate_backward(&bc.ln3.normed, &chunk(&bc.mods, 5, d), &dff_in);
            set_chunk(&mut dmods, 4, d, &dsh);
            set_chunk(&mut dmods, 5, d, &dsc);
            dz += &layer_norm_backward(&bc.ln3, &dn3);

            // blended cross-attention
            let lambda = cfg.lambda;
            let (dcross, dlaca) = match &bc.laca_c {
                Some(_) if lambda == 1.0 => (&dz * 0.0, Some(dz.clone())),
                Some(_) => (&dz * (1.0 - lambda), Some(&dz * lambda)),
                None => (dz.clone(), None),
            };
            let cg = row_attention_backward(&bc.cross_c, &b.cross, &dcross);
            gb.cross = cg.weights;
            let mut dbb = cg.dz;
            accumulate(&mut dglobal, &cg.dfeatures[0]);
            if let (Some(lc), Some(dl), Some(lw)) = (&bc.laca_c, dlaca, &b.laca) {
                let lg = row_attention_backward(lc, lw, &dl);
                gb.laca = Some(lg.weights);
                dbb += &lg.dz;
                accumulate(&mut dglobal, &lg.dfeatures[0]);
            }
            let (dn2, dsh, dsc) = modulate_backward(&bc.ln2.normed, &chunk(&bc.mods, 3, d), &dbb);
            set_chunk(&mut dmods, 2, d, &dsh);
            set_chunk(&mut dmods, 3, d, &dsc);
            dz += &layer_norm_backward(&bc.ln2, &dn2);

            // self-attention
            let (sw, da) = self_attention_backward(&bc.self_c, &b.self_attn, &dz);
            gb.self_attn = sw;
            let (dn1, dsh, dsc) = modulate_backward(&bc.ln1.normed, &chunk(&bc.mods, 1, d), &da);
            set_chunk(&mut dmods, 0, d, &dsh);
            set_chunk(&mut dmods, 1, d, &dsc);
            dz += &layer_norm_backward(&bc.ln1, &dn1);

            gb.modulation.w = cache.ctx.t().dot(&dmods);
            gb.modulation.b = dmods.clone();
            dctx += &dmods.dot(&b.modulation.w.t());
        }

        g.embed.w = cache.patches.t().dot(&dz);
        g.embed.b = col_sum(&dz);

        let dtemb = silu_backward(&cache.temb, &dctx);
        g.time2.w = silu(&cache.time_pre).t().dot(&dtemb);
        g.time2.b = dtemb.clone();
        let dpre = silu_backward(&cache.time_pre, &dtemb.dot(&p.time2.w.t()));
        g.time1.w = cache.time_sin.t().dot(&dpre);
        g.time1.b = dpre;

        if cache.global_is_null {
            if let Some(dg) = dglobal {
                g.null_global = dg;
            }
        }
        debug_assert_eq!(cache.grid, cfg.grid());
        Ok(g)
    }
}

fn accumulate(acc: &mut Option<Mat>, x: &Mat) {
    match acc {
        Some(a) => *a += x,
        None => *acc = Some(x.clone()),
    }
}

fn run_laca(
    bb: &Mat,
    cond: &ConditionBundle,
    global: &Mat,
    w: &AttentionWeights,
    cfg: &ModelConfig,
) -> Result<(Mat, RowAttnCache)> {
    match &cond.locals {
        Some(l) => laca_fwd(bb, &l.field, &l.texts, global, w),
        None => laca_fwd(bb, &AssignmentField::all_global(cfg.grid()), &[], global, w),
    }
}
