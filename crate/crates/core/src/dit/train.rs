use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::model::{ConditionBundle, DitModel};
use super::params::{gaussian, DitParams};
use super::Volume;
use crate::attention::GradCheckable;
use crate::error::{Error, Result};

/// `X_t = t X1 + (1 - t) X0`.
pub fn interpolate(x0: &Volume, x1: &Volume, t: f64) -> Result<Volume> {
    same_shape(x0, x1)?;
    Ok(x1 * t + x0 * (1.0 - t))
}

/// Mean squared error between the predicted velocity and `X1 - X0`.
pub fn flow_matching_loss(pred: &Volume, x0: &Volume, x1: &Volume) -> Result<f64> {
    Ok(flow_matching_loss_and_grad(pred, x0, x1)?.0)
}

/// Loss and its gradient with respect to `pred`.
pub fn flow_matching_loss_and_grad(pred: &Volume, x0: &Volume, x1: &Volume) -> Result<(f64, Volume)> {
    same_shape(x0, x1)?;
    same_shape(pred, x0)?;
    let diff = pred - &(x1 - x0);
    let n = diff.len() as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

fn same_shape(a: &Volume, b: &Volume) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("volumes {:?} and {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Independently nulls the global and local components.
pub fn condition_dropout<R: Rng>(
    cond: &ConditionBundle,
    p_global: f64,
    p_local: f64,
    rng: &mut R,
) -> Result<ConditionBundle> {
    for p in [p_global, p_local] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParam(format!("dropout probability {p} outside [0, 1]")));
        }
    }
    // both draws always happen so the rng stream does not depend on the bundle
    let drop_g = rng.gen::<f64>() < p_global;
    let drop_l = rng.gen::<f64>() < p_local;
    Ok(ConditionBundle {
        global: if drop_g { None } else { cond.global.clone() },
        locals: if drop_l { None } else { cond.locals.clone() },
    })
}

#[derive(Debug, Clone)]
pub struct TrainExample {
    /// Clean latent.
    pub x1: Volume,
    pub cond: ConditionBundle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    /// Whole model, the from-scratch toy mode.
    #[default]
    All,
    /// Only the LACA branch; everything else is frozen.
    LacaOnly,
}

impl Trainable {
    pub fn includes(self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::LacaOnly => name.contains(".laca."),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub drop_global: f64,
    pub drop_local: f64,
    pub trainable: Trainable,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 10.0,
            drop_global: 0.8,
            drop_local: 0.1,
            trainable: Trainable::All,
        }
    }
}

impl TrainHyper {
    pub fn check(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip > 0.0;
        if !ok {
            return Err(Error::InvalidParam(format!("bad optimizer settings {self:?}")));
        }
        for p in [self.drop_global, self.drop_local] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParam(format!("dropout probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// Global gradient norm before clipping, over trainable tensors.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub hyper: TrainHyper,
    m: DitParams,
    v: DitParams,
    steps: u64,
}

impl AdamW {
    pub fn new(params: &DitParams, hyper: TrainHyper) -> Result<Self> {
        hyper.check()?;
        Ok(Self {
            hyper,
            m: params.zeros_like(),
            v: params.zeros_like(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One optimizer step on a batch: per example a fresh `t ~ U(0, 1)`,
    /// noise `X0 ~ N(0, I)` and condition dropout, gradients averaged over the
    /// batch in order.
    pub fn train_step<R: Rng>(
        &mut self,
        model: &mut DitModel,
        batch: &[TrainExample],
        rng: &mut R,
    ) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidParam("empty batch".into()));
        }
        let mut grads: Option<DitParams> = None;
        let mut loss = 0.0;
        for ex in batch {
            let t: f64 = rng.gen();
            let x0 = Volume::from_shape_simple_fn(ex.x1.raw_dim(), || StandardNormal.sample(rng));
            let cond = condition_dropout(&ex.cond, self.hyper.drop_global, self.hyper.drop_local, rng)?;
            let xt = interpolate(&x0, &ex.x1, t)?;
            let (pred, cache) = model.forward_train(&xt, t, &cond)?;
            let (l, dpred) = flow_matching_loss_and_grad(&pred, &x0, &ex.x1)?;
            if !l.is_finite() {
                return Err(Error::NonFinite("training loss".into()));
            }
            loss += l;
            let g = model.backward(&cache, &dpred)?;
            match &mut grads {
                Some(acc) => {
                    for ((_, a), (_, b)) in acc.named_mut().into_iter().zip(g.named()) {
                        *a += b;
                    }
                }
                None => grads = Some(g),
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let scale = 1.0 / batch.len() as f64;
        for (_, g) in grads.named_mut() {
            *g *= scale;
        }
        let report = self.apply(&mut model.params, &grads, loss * scale)?;
        Ok(report)
    }

    /// Applies precomputed gradients.
    pub fn apply(&mut self, params: &mut DitParams, grads: &DitParams, loss: f64) -> Result<StepReport> {
        let h = self.hyper.clone();
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let trainable: Vec<bool> = names.iter().map(|n| h.trainable.includes(n)).collect();
        let grad_list = grads.named();
        if grad_list.len() != names.len() {
            return Err(Error::Shape("gradient and parameter sets differ".into()));
        }
        let norm = grad_list
            .iter()
            .zip(&trainable)
            .filter(|(_, &tr)| tr)
            .flat_map(|((_, g), _)| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        let clipped = norm > h.grad_clip;
        let gscale = if clipped { h.grad_clip / norm } else { 1.0 };

        self.steps += 1;
        let bc1 = 1.0 - h.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - h.beta2.powi(self.steps as i32);
        let ms = self.m.named_mut();
        let vs = self.v.named_mut();
        for ((((_, p), (_, g)), ((_, m), (_, v))), tr) in params
            .named_mut()
            .into_iter()
            .zip(grad_list)
            .zip(ms.into_iter().zip(vs))
            .zip(&trainable)
        {
            if !tr {
                continue;
            }
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * gscale;
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + h.eps) + h.weight_decay * *p;
                *p -= h.lr * update;
            });
        }
        Ok(StepReport {
            loss,
            grad_norm: norm,
            clipped,
        })
    }
}

/// The flow-matching loss of one fixed `(X0, X1, t, cond)` as a function of
/// every model parameter, flattened in [`DitParams::named`] order.
#[derive(Debug, Clone)]
pub struct LossProbe {
    pub model: DitModel,
    pub x0: Volume,
    pub x1: Volume,
    pub t: f64,
    pub cond: ConditionBundle,
    offsets: Vec<usize>,
}

impl LossProbe {
    pub fn new(model: DitModel, x0: Volume, x1: Volume, t: f64, cond: ConditionBundle) -> Self {
        let mut offsets = vec![0];
        for (_, m) in model.params.named() {
            offsets.push(offsets.last().unwrap() + m.len());
        }
        Self {
            model,
            x0,
            x1,
            t,
            cond,
            offsets,
        }
    }

    fn locate(&self, i: usize) -> (usize, usize) {
        let k = self.offsets.partition_point(|&o| o <= i) - 1;
        (k, i - self.offsets[k])
    }
}

impl GradCheckable for LossProbe {
    fn num_params(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    fn param(&self, i: usize) -> f64 {
        let (k, j) = self.locate(i);
        let (_, m) = &self.model.params.named()[k];
        m.as_slice().expect("standard layout")[j]
    }

    fn set_param(&mut self, i: usize, value: f64) {
        let (k, j) = self.locate(i);
        let mut named = self.model.params.named_mut();
        named[k].1.as_slice_mut().expect("standard layout")[j] = value;
    }

    fn loss(&self) -> Result<f64> {
        let xt = interpolate(&self.x0, &self.x1, self.t)?;
        let pred = self.model.forward(&xt, self.t, &self.cond)?;
        flow_matching_loss(&pred, &self.x0, &self.x1)
    }

    fn analytic_grad(&self) -> Result<Vec<f64>> {
        let xt = interpolate(&self.x0, &self.x1, self.t)?;
        let (pred, cache) = self.model.forward_train(&xt, self.t, &self.cond)?;
        let (_, dpred) = flow_matching_loss_and_grad(&pred, &self.x0, &self.x1)?;
        let g = self.model.backward(&cache, &dpred)?;
        Ok(g.named().into_iter().flat_map(|(_, m)| m.iter().copied().collect::<Vec<_>>()).collect())
    }
}

/// Worst relative error between analytic and central-difference gradients of
/// the full loss, for a randomized `depth`-block model on a 2x2x1 token grid
/// conditioned on a caption and one local track.
pub fn full_model_grad_check(seed: u64, depth: usize) -> Result<f64> {
    use rand::SeedableRng;

    use super::{ModelConfig, PosEncoding};
    use crate::attention::grad_check;
    use crate::grounding::{build_assignment, GroundingParams};
    use crate::trajectory::{LatentTrajectory, LocalText};

    let cfg = ModelConfig {
        depth,
        dim: 8,
        heads: 2,
        patch: [1, 1, 1],
        channels: 2,
        frames: 2,
        height: 2,
        width: 1,
        time_embed_dim: 4,
        ff_mult: 2,
        lambda: 0.5,
        laca_enabled: true,
        pos_encoding: PosEncoding::Sinusoidal,
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let model = DitModel::new_randomized(cfg.clone(), seed, 0.5)?;
    let mut normal = |shape: (usize, usize, usize, usize)| {
        Volume::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
    };
    let x0 = normal(cfg.volume_shape());
    let x1 = normal(cfg.volume_shape());
    let global = gaussian((2, cfg.dim), 1.0, &mut rng);
    let feature = gaussian((1, cfg.dim), 1.0, &mut rng);
    let t: f64 = rng.gen_range(0.05..0.95);
    let grid = cfg.grid();
    let traj = LatentTrajectory::new(vec![Some((0.3, 0.2)); grid.t], "a");
    let field = build_assignment(&[traj], grid, &GroundingParams::default())?;
    let cond = ConditionBundle {
        global: Some(global),
        locals: Some(super::LocalCondition {
            texts: vec![LocalText::new("a", "red circle").with_feature(feature)],
            field,
        }),
    };
    let mut probe = LossProbe::new(model, x0, x1, t, cond);
    grad_check(&mut probe, 1e-5)
}
