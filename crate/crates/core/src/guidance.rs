//! Classifier-free guidance composition and the Euler sampler.
//!
//! A guidance scheme names the model passes it needs (which condition
//! components are present in each) and composes their predictions into one
//! velocity. Schemes live in a [`GuidanceRegistry`] and are selected by name.

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dit::{ConditionBundle, DitModel, Volume};
use crate::error::{Error, Result};
use crate::registry::Registry;

fn same_shape(vs: &[&Volume]) -> Result<()> {
    let first = vs[0].dim();
    if let Some(v) = vs.iter().find(|v| v.dim() != first) {
        return Err(Error::Shape(format!("guidance inputs {:?} and {:?}", first, v.dim())));
    }
    Ok(())
}

/// `e_uncond + s (e_cond - e_uncond)`.
pub fn single_cfg(e_uncond: &Volume, e_cond: &Volume, s: f64) -> Result<Volume> {
    same_shape(&[e_uncond, e_cond])?;
    Ok(Zip::from(e_uncond).and(e_cond).map_collect(|&u, &c| u + s * (c - u)))
}

/// `e_none + s (e_both - e_none)`: both conditions treated as one.
pub fn combined_cfg(e_none: &Volume, e_both: &Volume, s: f64) -> Result<Volume> {
    single_cfg(e_none, e_both, s)
}

/// `e_none + s_glob (e_both - e_glob) + s_loc (e_both - e_loc)`.
pub fn dual_cfg(
    e_none: &Volume,
    e_glob: &Volume,
    e_loc: &Volume,
    e_both: &Volume,
    s_glob: f64,
    s_loc: f64,
) -> Result<Volume> {
    same_shape(&[e_none, e_glob, e_loc, e_both])?;
    if s_glob == 0.0 && s_loc == 0.0 {
        return Ok(e_none.clone());
    }
    let mut out = e_none.clone();
    Zip::from(&mut out)
        .and(e_glob)
        .and(e_loc)
        .and(e_both)
        .for_each(|o, &g, &l, &b| {
            let (dg, dl) = (b - g, b - l);
            // a shared difference factors out: one multiply, and the
            // reduction to combined guidance stays exact
            let inc = if dg == dl {
                (s_glob + s_loc) * dg
            } else {
                s_glob * dg + s_loc * dl
            };
            *o += inc;
        });
    Ok(out)
}

/// Which condition components one model pass sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pass {
    Null,
    Global,
    Local,
    Both,
}

impl Pass {
    fn needs(self) -> (bool, bool) {
        match self {
            Pass::Null => (false, false),
            Pass::Global => (true, false),
            Pass::Local => (false, true),
            Pass::Both => (true, true),
        }
    }

    /// The bundle for this pass, or the component the scheme is missing.
    pub fn bundle(self, cond: &ConditionBundle) -> std::result::Result<ConditionBundle, &'static str> {
        let (g, l) = self.needs();
        if g && cond.global.is_none() {
            return Err("global");
        }
        if l && cond.locals.is_none() {
            return Err("local");
        }
        Ok(ConditionBundle {
            global: if g { cond.global.clone() } else { None },
            locals: if l { cond.locals.clone() } else { None },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceSpec {
    /// Registered scheme name.
    pub scheme: String,
    /// Scale of the single and combined schemes.
    pub s: f64,
    pub s_glob: f64,
    pub s_loc: f64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            scheme: "dual".into(),
            s: 5.0,
            s_glob: 5.0,
            s_loc: 4.0,
        }
    }
}

impl GuidanceSpec {
    pub fn named(scheme: &str) -> Self {
        Self {
            scheme: scheme.into(),
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if ![self.s, self.s_glob, self.s_loc].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParam("guidance scales must be finite".into()));
        }
        Ok(())
    }
}

pub trait GuidanceScheme: Send + Sync {
    fn name(&self) -> &'static str;
    /// Model passes in the order [`GuidanceScheme::compose`] receives them.
    fn passes(&self) -> &'static [Pass];
    fn compose(&self, preds: &[Volume], spec: &GuidanceSpec) -> Result<Volume>;
}

/// Pure unconditional prediction.
pub struct NoGuidance;
/// Guidance on the global caption, with trajectories present in both passes.
pub struct SingleGlobal;
/// Guidance on the trajectories, with the caption present in both passes.
pub struct SingleLocal;
/// Caption and trajectories guided as one condition.
pub struct Combined;
/// Separate scales for caption and trajectories.
pub struct Dual;

impl GuidanceScheme for NoGuidance {
    fn name(&self) -> &'static str {
        "none"
    }
    fn passes(&self) -> &'static [Pass] {
        &[Pass::Null]
    }
    fn compose(&self, preds: &[Volume], _: &GuidanceSpec) -> Result<Volume> {
        Ok(preds[0].clone())
    }
}

impl GuidanceScheme for SingleGlobal {
    fn name(&self) -> &'static str {
        "single_global"
    }
    fn passes(&self) -> &'static [Pass] {
        &[Pass::Local, Pass::Both]
    }
    fn compose(&self, preds: &[Volume], spec: &GuidanceSpec) -> Result<Volume> {
        single_cfg(&preds[0], &preds[1], spec.s)
    }
}

impl GuidanceScheme for SingleLocal {
    fn name(&self) -> &'static str {
        "single_local"
    }
    fn passes(&self) -> &'static [Pass] {
        &[Pass::Global, Pass::Both]
    }
    fn compose(&self, preds: &[Volume], spec: &GuidanceSpec) -> Result<Volume> {
        single_cfg(&preds[0], &preds[1], spec.s)
    }
}

impl GuidanceScheme for Combined {
    fn name(&self) -> &'static str {
        "combined"
    }
    fn passes(&self) -> &'static [Pass] {
        &[Pass::Null, Pass::Both]
    }
    fn compose(&self, preds: &[Volume], spec: &GuidanceSpec) -> Result<Volume> {
        combined_cfg(&preds[0], &preds[1], spec.s)
    }
}

impl GuidanceScheme for Dual {
    fn name(&self) -> &'static str {
        "dual"
    }
    fn passes(&self) -> &'static [Pass] {
        &[Pass::Null, Pass::Global, Pass::Local, Pass::Both]
    }
    fn compose(&self, preds: &[Volume], spec: &GuidanceSpec) -> Result<Volume> {
        dual_cfg(&preds[0], &preds[1], &preds[2], &preds[3], spec.s_glob, spec.s_loc)
    }
}

/// Guidance schemes by name.
pub type GuidanceRegistry = Registry<dyn GuidanceScheme>;

/// The five built-in schemes.
pub fn guidance_registry() -> GuidanceRegistry {
    let mut r = Registry::new("guidance scheme");
    let all: [Box<dyn GuidanceScheme>; 5] = [
        Box::new(NoGuidance),
        Box::new(SingleGlobal),
        Box::new(SingleLocal),
        Box::new(Combined),
        Box::new(Dual),
    ];
    for s in all {
        r.register(s.name(), s);
    }
    r
}

/// Anything that predicts a velocity for `(x_t, t, cond)`.
pub trait VelocityField {
    fn velocity(&self, x: &Volume, t: f64, cond: &ConditionBundle) -> Result<Volume>;
    fn volume_shape(&self) -> (usize, usize, usize, usize);
}

impl VelocityField for DitModel {
    fn velocity(&self, x: &Volume, t: f64, cond: &ConditionBundle) -> Result<Volume> {
        self.forward(x, t, cond)
    }

    fn volume_shape(&self) -> (usize, usize, usize, usize) {
        self.config().volume_shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 10, seed: 0 }
    }
}

/// The seeded `N(0, I)` starting point of [`sample`].
pub fn initial_noise(shape: (usize, usize, usize, usize), seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_shape_simple_fn(shape, || StandardNormal.sample(&mut rng))
}

/// Guided velocity at one state.
pub fn guided_velocity(
    model: &dyn VelocityField,
    scheme: &dyn GuidanceScheme,
    x: &Volume,
    t: f64,
    cond: &ConditionBundle,
    spec: &GuidanceSpec,
) -> Result<Volume> {
    let preds = scheme
        .passes()
        .iter()
        .map(|p| {
            let bundle = p.bundle(cond).map_err(|component| Error::MissingCondition {
                scheme: scheme.name().into(),
                component,
            })?;
            model.velocity(x, t, &bundle)
        })
        .collect::<Result<Vec<_>>>()?;
    scheme.compose(&preds, spec)
}

/// Integrates the guided velocity from seeded noise at `t = 0` to `t = 1`
/// with uniform explicit Euler steps.
pub fn sample(
    model: &dyn VelocityField,
    cond: &ConditionBundle,
    spec: &GuidanceSpec,
    sc: &SamplerConfig,
    registry: &GuidanceRegistry,
) -> Result<Volume> {
    spec.check()?;
    if sc.steps == 0 {
        return Err(Error::InvalidParam("sampler needs at least one step".into()));
    }
    let scheme = registry.get(&spec.scheme)?;
    // fail before any model work if a pass cannot be formed
    for p in scheme.passes() {
        p.bundle(cond).map_err(|component| Error::MissingCondition {
            scheme: scheme.name().into(),
            component,
        })?;
    }
    let mut x = initial_noise(model.volume_shape(), sc.seed);
    let dt = 1.0 / sc.steps as f64;
    for k in 0..sc.steps {
        let t = k as f64 * dt;
        let v = guided_velocity(model, scheme, &x, t, cond, spec)?;
        x.scaled_add(dt, &v);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn vol(v: f64) -> Volume {
        Volume::from_elem((2, 2, 2, 1), v)
    }

    fn ramp(offset: f64) -> Volume {
        Volume::from_shape_fn((2, 2, 2, 1), |(a, b, c, _)| offset + (a * 4 + b * 2 + c) as f64 * 0.37)
    }

    fn close(a: &Volume, b: &Volume) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-15 * (1.0 + y.abs()))
    }

    #[test]
    fn single_cfg_examples() {
        let (u, c) = (ramp(0.0), ramp(1.5));
        assert_eq!(single_cfg(&u, &c, 0.0).unwrap(), u);
        assert!(close(&single_cfg(&u, &c, 1.0).unwrap(), &c));
        assert_eq!(single_cfg(&vol(1.0), &vol(3.0), 2.0).unwrap(), vol(5.0));
        assert!(single_cfg(&vol(1.0), &Volume::zeros((1, 1, 1, 1)), 2.0).is_err());
    }

    #[test]
    fn combined_cfg_examples() {
        let (n, b) = (ramp(0.2), ramp(-1.0));
        assert!(close(&combined_cfg(&n, &b, 1.0).unwrap(), &b));
        assert_eq!(combined_cfg(&n, &n, 7.5).unwrap(), n);
    }

    #[test]
    fn dual_cfg_examples() {
        let e = ramp(0.4);
        assert_eq!(dual_cfg(&e, &e, &e, &e, 5.0, 4.0).unwrap(), e);
        let (n, g, l, b) = (ramp(0.0), ramp(1.0), ramp(2.0), ramp(3.5));
        assert_eq!(dual_cfg(&n, &g, &l, &b, 0.0, 0.0).unwrap(), n);
        let out = dual_cfg(&vol(0.0), &vol(1.0), &vol(2.0), &vol(3.0), 1.0, 1.0).unwrap();
        assert_eq!(out, vol(3.0));
        let comb = combined_cfg(&n, &b, 2.5).unwrap();
        assert_eq!(dual_cfg(&n, &n, &n, &b, 1.5, 1.0).unwrap(), comb);
    }

    #[test]
    fn registry_lookup() {
        let r = guidance_registry();
        assert_eq!(r.names(), ["combined", "dual", "none", "single_global", "single_local"]);
        assert_eq!(r.get("dual").unwrap().passes().len(), 4);
        let err = r.get("triple").err().unwrap();
        assert!(err.is_validation());
        assert!(err.to_string().contains("dual"));
    }

    /// Ignores its input and returns a fixed velocity.
    struct Constant(Volume);

    impl VelocityField for Constant {
        fn velocity(&self, _: &Volume, _: f64, _: &ConditionBundle) -> Result<Volume> {
            Ok(self.0.clone())
        }
        fn volume_shape(&self) -> (usize, usize, usize, usize) {
            self.0.dim()
        }
    }

    /// Velocity that depends on the condition present, for scheme wiring.
    struct ByCondition;

    impl VelocityField for ByCondition {
        fn velocity(&self, x: &Volume, t: f64, cond: &ConditionBundle) -> Result<Volume> {
            let g = cond.global.is_some() as u8 as f64;
            let l = cond.locals.is_some() as u8 as f64;
            Ok(x * 0.1 + (g + 2.0 * l + t))
        }
        fn volume_shape(&self) -> (usize, usize, usize, usize) {
            (2, 2, 2, 1)
        }
    }

    fn global_cond() -> ConditionBundle {
        ConditionBundle {
            global: Some(Array2::ones((1, 4))),
            locals: None,
        }
    }

    #[test]
    fn constant_field_integrates_exactly() {
        let v = ramp(-0.3);
        let model = Constant(v.clone());
        let r = guidance_registry();
        for steps in [1, 3, 10] {
            let sc = SamplerConfig { steps, seed: 4 };
            let x0 = initial_noise(v.dim(), 4);
            for scheme in ["none", "single_local", "combined"] {
                let out = sample(&model, &global_cond().with_empty_locals(), &GuidanceSpec::named(scheme), &sc, &r).unwrap();
                for ((o, a), b) in out.iter().zip(&x0).zip(&v) {
                    assert!((o - (a + b)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn one_step_is_one_euler_step() {
        let r = guidance_registry();
        let sc = SamplerConfig { steps: 1, seed: 9 };
        let out = sample(&ByCondition, &global_cond(), &GuidanceSpec::named("none"), &sc, &r).unwrap();
        let x0 = initial_noise((2, 2, 2, 1), 9);
        let expect = &x0 + &ByCondition.velocity(&x0, 0.0, &ConditionBundle::null()).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn dual_with_zero_scales_is_unconditional() {
        let r = guidance_registry();
        let sc = SamplerConfig { steps: 4, seed: 1 };
        let cond = global_cond().with_empty_locals();
        let spec = GuidanceSpec {
            s_glob: 0.0,
            s_loc: 0.0,
            ..GuidanceSpec::named("dual")
        };
        let a = sample(&ByCondition, &cond, &spec, &sc, &r).unwrap();
        let b = sample(&ByCondition, &cond, &GuidanceSpec::named("none"), &sc, &r).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, sample(&ByCondition, &cond, &spec, &sc, &r).unwrap());
    }

    #[test]
    fn missing_component_is_reported() {
        let r = guidance_registry();
        let err = sample(&ByCondition, &global_cond(), &GuidanceSpec::named("dual"), &SamplerConfig::default(), &r)
            .unwrap_err();
        assert!(matches!(err, Error::MissingCondition { component: "local", .. }));
        for (scheme, ok) in [("none", true), ("single_local", false), ("combined", false)] {
            let out = sample(&ByCondition, &global_cond(), &GuidanceSpec::named(scheme), &SamplerConfig::default(), &r);
            assert_eq!(out.is_ok(), ok, "{scheme}");
        }
        let zero = SamplerConfig { steps: 0, seed: 0 };
        assert!(sample(&ByCondition, &global_cond(), &GuidanceSpec::named("none"), &zero, &r).is_err());
    }

    trait WithEmptyLocals {
        fn with_empty_locals(self) -> Self;
    }

    impl WithEmptyLocals for ConditionBundle {
        fn with_empty_locals(mut self) -> Self {
            use crate::dit::LocalCondition;
            use crate::grounding::{AssignmentField, GridShape};
            self.locals = Some(LocalCondition {
                texts: vec![],
                field: AssignmentField::all_global(GridShape::new(2, 2, 2)),
            });
            self
        }
    }
}
