use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::*;
use crate::grounding::{build_assignment, GridShape, GroundingParams};
use crate::trajectory::LatentTrajectory;

fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let n = Normal::new(0.0, 1.0).unwrap();
    Mat::from_shape_fn((rows, cols), |_| n.sample(rng))
}

/// Textbook multi-head attention with explicit loops; the reference the
/// row kernel is checked against.
fn naive_attention(z: &Mat, sources: &[(Mat, f64)], w: &AttentionWeights) -> Mat {
    let d = w.dim();
    let dh = w.head_dim();
    let mut hcat = Mat::zeros((z.nrows(), d));
    for (r, (f, g)) in sources.iter().enumerate() {
        let h_feat = f * *g;
        let q = z.row(r).dot(&w.wq);
        let k = h_feat.dot(&w.wk);
        let v = h_feat.dot(&w.wv);
        for m in 0..w.heads {
            let mut logits: Vec<f64> = (0..k.nrows())
                .map(|j| {
                    (0..dh).map(|c| q[m * dh + c] * k[[j, m * dh + c]]).sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for l in logits.iter_mut() {
                *l = (*l - mx).exp() / s;
            }
            for c in 0..dh {
                hcat[[r, m * dh + c]] = (0..k.nrows()).map(|j| logits[j] * v[[j, m * dh + c]]).sum();
            }
        }
    }
    hcat.dot(&w.wo)
}

fn close(a: &Mat, b: &Mat, tol: f64) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn singleton_text_gives_value_projection_everywhere() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = AttentionWeights::random(4, 2, &mut rng);
    let row = rand_mat(1, 4, &mut rng);
    let z = Mat::from_shape_fn((3, 4), |(_, c)| row[[0, c]]);
    let f = rand_mat(1, 4, &mut rng);
    let out = cross_attention(&z, &f, &w).unwrap();
    let expected = f.dot(&w.wv).dot(&w.wo);
    for r in 0..3 {
        for c in 0..4 {
            assert!((out[[r, c]] - expected[[0, c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_queries_attend_uniformly() {
    // D = 4, M = 1, two text tokens: zero queries give equal logits, so the
    // output is the mean value row pushed through W_O.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = AttentionWeights::random(4, 1, &mut rng);
    let z = Mat::zeros((5, 4));
    let f = array![[1.0, 2.0, 0.0, -1.0], [3.0, 0.0, 1.0, 1.0]];
    let v = f.dot(&w.wv);
    let mean_v = array![[
        (v[[0, 0]] + v[[1, 0]]) / 2.0,
        (v[[0, 1]] + v[[1, 1]]) / 2.0,
        (v[[0, 2]] + v[[1, 2]]) / 2.0,
        (v[[0, 3]] + v[[1, 3]]) / 2.0
    ]];
    let expected = mean_v.dot(&w.wo);
    let out = cross_attention(&z, &f, &w).unwrap();
    for r in 0..5 {
        for c in 0..4 {
            assert!((out[[r, c]] - expected[[0, c]]).abs() < 1e-12);
        }
    }
}

#[test]
fn text_permutation_leaves_output_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = AttentionWeights::random(8, 2, &mut rng);
    let z = rand_mat(6, 8, &mut rng);
    let f = rand_mat(4, 8, &mut rng);
    let perm = [2usize, 0, 3, 1];
    let fp = Mat::from_shape_fn((4, 8), |(r, c)| f[[perm[r], c]]);
    let a = cross_attention(&z, &f, &w).unwrap();
    let b = cross_attention(&z, &fp, &w).unwrap();
    assert!(close(&a, &b, 1e-12));
}

#[test]
fn cross_attention_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = AttentionWeights::random(8, 2, &mut rng);
    let z = rand_mat(5, 8, &mut rng);
    let f = rand_mat(3, 8, &mut rng);
    let srcs: Vec<(Mat, f64)> = (0..5).map(|_| (f.clone(), 1.0)).collect();
    assert!(close(&cross_attention(&z, &f, &w).unwrap(), &naive_attention(&z, &srcs, &w), 1e-12));
}

#[test]
fn dimension_mismatch_rejected() {
    let w = AttentionWeights::zeros(4, 2);
    assert!(cross_attention(&Mat::zeros((2, 3)), &Mat::zeros((1, 4)), &w).is_err());
    assert!(cross_attention(&Mat::zeros((2, 4)), &Mat::zeros((1, 5)), &w).is_err());
    let bad = AttentionWeights::zeros(4, 3);
    assert!(cross_attention(&Mat::zeros((2, 4)), &Mat::zeros((1, 4)), &bad).is_err());
}

fn one_traj_field(shape: GridShape, p: (f64, f64), params: &GroundingParams) -> AssignmentField {
    let traj = LatentTrajectory::new(vec![Some(p); shape.t], "m0");
    build_assignment(&[traj], shape, params).unwrap()
}

#[test]
fn all_global_laca_is_bitwise_cross_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = AttentionWeights::random(8, 2, &mut rng);
    let z = rand_mat(12, 8, &mut rng);
    let g = rand_mat(3, 8, &mut rng);
    let field = AssignmentField::all_global(GridShape::new(3, 2, 2));
    let a = laca(&z, &field, &[], &g, &w).unwrap();
    let b = cross_attention(&z, &g, &w).unwrap();
    assert_eq!(a, b);
}

#[test]
fn assigned_singleton_cell_sees_only_its_local_text() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = AttentionWeights::random(4, 2, &mut rng);
    let z = rand_mat(4, 4, &mut rng);
    let g = rand_mat(2, 4, &mut rng);
    let fm = rand_mat(1, 4, &mut rng);
    let locals = [LocalText::new("m0", "red circle").with_feature(fm.clone())];
    let params = GroundingParams::point_only();
    let field = one_traj_field(GridShape::new(1, 2, 2), (1.0, 0.0), &params);
    let out = laca(&z, &field, &locals, &g, &w).unwrap();
    let global = cross_attention(&z, &g, &w).unwrap();
    let assigned = GridShape::new(1, 2, 2).index(0, 0, 1);
    let expected = fm.dot(&w.wv).dot(&w.wo);
    for r in 0..4 {
        for c in 0..4 {
            if r == assigned {
                assert!((out[[r, c]] - expected[[0, c]]).abs() < 1e-12);
            } else {
                assert_eq!(out[[r, c]], global[[r, c]]);
            }
        }
    }
}

#[test]
fn half_weight_scales_keys_and_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = AttentionWeights::random(4, 2, &mut rng);
    let z = rand_mat(9, 4, &mut rng);
    let g = rand_mat(2, 4, &mut rng);
    let fm = rand_mat(2, 4, &mut rng);
    let locals = [LocalText::new("m0", "blue square").with_feature(fm.clone())];
    let shape = GridShape::new(1, 3, 3);
    // a unit offset gives weight exp(-1 / (2 sigma^2)) = 0.5
    let gauss = GroundingParams {
        sigma: (1.0 / (2.0 * 2.0f64.ln())).sqrt(),
        ..GroundingParams::default()
    };
    let field = one_traj_field(shape, (1.0, 1.0), &gauss);
    let side = shape.index(0, 1, 2);
    match field.cells()[side] {
        Cell::Local { weight, .. } => assert!((weight - 0.5).abs() < 1e-12),
        Cell::Global => panic!("neighbor not assigned"),
    }
    let out = laca(&z, &field, &locals, &g, &w).unwrap();
    let srcs: Vec<(Mat, f64)> = field
        .cells()
        .iter()
        .map(|c| match *c {
            Cell::Global => (g.clone(), 1.0),
            Cell::Local { weight, .. } => (fm.clone(), weight),
        })
        .collect();
    assert!(close(&out, &naive_attention(&z, &srcs, &w), 1e-12));

    let flat = one_traj_field(shape, (1.0, 1.0), &GroundingParams { gaussian_enabled: false, ..gauss });
    let out_flat = laca(&z, &flat, &locals, &g, &w).unwrap();
    let diff: f64 = out.row(side).iter().zip(out_flat.row(side)).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6, "weight 0.5 must change the output");
}

#[test]
fn laca_field_size_checked() {
    let w = AttentionWeights::zeros(4, 1);
    let field = AssignmentField::all_global(GridShape::new(1, 2, 2));
    assert!(laca(&Mat::zeros((5, 4)), &field, &[], &Mat::zeros((1, 4)), &w).is_err());
}

#[test]
fn laca_missing_feature_rejected() {
    let w = AttentionWeights::zeros(4, 1);
    let field = one_traj_field(GridShape::new(1, 2, 2), (0.0, 0.0), &GroundingParams::default());
    let locals = [LocalText::new("m0", "red")];
    assert!(matches!(
        laca(&Mat::zeros((4, 4)), &field, &locals, &Mat::zeros((1, 4)), &w),
        Err(Error::MissingFeature(_))
    ));
}

#[test]
fn blend_endpoints_and_midpoint() {
    let a = Mat::from_elem((2, 3), 2.0);
    let b = Mat::from_elem((2, 3), 4.0);
    assert_eq!(blend(&a, &b, BlendConfig::new(0.0).unwrap()).unwrap(), a);
    assert_eq!(blend(&a, &b, BlendConfig::new(1.0).unwrap()).unwrap(), b);
    assert_eq!(
        blend(&a, &b, BlendConfig::new(0.5).unwrap()).unwrap(),
        Mat::from_elem((2, 3), 3.0)
    );
    assert!(blend(&a, &Mat::zeros((3, 2)), BlendConfig::new(0.5).unwrap()).is_err());
    assert!(BlendConfig::new(1.5).is_err());
    assert!(BlendConfig::new(-0.1).is_err());
}

#[test]
fn blend_zero_keeps_nonfinite_laca_out() {
    let a = Mat::from_elem((1, 2), -0.0);
    let b = Mat::from_elem((1, 2), 1.0);
    let out = blend(&a, &b, BlendConfig::new(0.0).unwrap()).unwrap();
    assert!(out.iter().all(|v| v.to_bits() == (-0.0f64).to_bits()));
}

// ---- gradient checks -------------------------------------------------------

struct LinearProbe {
    w: Mat,
    x: Vec<f64>,
}

impl GradCheckable for LinearProbe {
    fn num_params(&self) -> usize {
        self.w.len()
    }
    fn param(&self, i: usize) -> f64 {
        self.w.as_slice().unwrap()[i]
    }
    fn set_param(&mut self, i: usize, v: f64) {
        self.w.as_slice_mut().unwrap()[i] = v;
    }
    fn loss(&self) -> Result<f64> {
        Ok((0..self.w.nrows())
            .map(|r| (0..self.w.ncols()).map(|c| self.w[[r, c]] * self.x[c]).sum::<f64>())
            .sum())
    }
    fn analytic_grad(&self) -> Result<Vec<f64>> {
        Ok((0..self.w.len()).map(|i| self.x[i % self.w.ncols()]).collect())
    }
}

#[test]
fn gradcheck_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut p = LinearProbe {
        w: rand_mat(3, 4, &mut rng),
        x: vec![0.3, -1.2, 2.0, 0.7],
    };
    assert!(grad_check(&mut p, 1e-5).unwrap() < 1e-6);
}

/// softmax over 3 logits read out by fixed coefficients
struct SoftmaxProbe {
    logits: Vec<f64>,
    readout: Vec<f64>,
}

impl GradCheckable for SoftmaxProbe {
    fn num_params(&self) -> usize {
        3
    }
    fn param(&self, i: usize) -> f64 {
        self.logits[i]
    }
    fn set_param(&mut self, i: usize, v: f64) {
        self.logits[i] = v;
    }
    fn loss(&self) -> Result<f64> {
        let mut p = self.logits.clone();
        softmax_in_place(&mut p);
        Ok(p.iter().zip(&self.readout).map(|(a, b)| a * b).sum())
    }
    fn analytic_grad(&self) -> Result<Vec<f64>> {
        let mut p = self.logits.clone();
        softmax_in_place(&mut p);
        let dot: f64 = p.iter().zip(&self.readout).map(|(a, b)| a * b).sum();
        Ok(p.iter().zip(&self.readout).map(|(pi, ri)| pi * (ri - dot)).collect())
    }
}

#[test]
fn gradcheck_softmax() {
    let mut p = SoftmaxProbe {
        logits: vec![0.2, -1.0, 1.5],
        readout: vec![1.0, -2.0, 0.5],
    };
    assert!(grad_check(&mut p, 1e-5).unwrap() < 1e-5);
}

/// Flattens weights, tokens and features into one parameter vector for a
/// LACA (or cross-attention, when the field is all global) probe.
struct LacaProbe {
    w: AttentionWeights,
    z: Mat,
    glob: Mat,
    locals: Vec<LocalText>,
    field: AssignmentField,
}

impl LacaProbe {
    fn slots(&self) -> Vec<usize> {
        let mut v = vec![self.w.wq.len(); 4];
        v.push(self.z.len());
        v.push(self.glob.len());
        v.extend(self.locals.iter().map(|l| l.feature.as_ref().unwrap().len()));
        v
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (s, n) in self.slots().into_iter().enumerate() {
            if i < n {
                return (s, i);
            }
            i -= n;
        }
        panic!("index out of range")
    }

    fn slot_mut(&mut self, s: usize) -> &mut Mat {
        match s {
            0 => &mut self.w.wq,
            1 => &mut self.w.wk,
            2 => &mut self.w.wv,
            3 => &mut self.w.wo,
            4 => &mut self.z,
            5 => &mut self.glob,
            k => self.locals[k - 6].feature.as_mut().unwrap(),
        }
    }
}

impl GradCheckable for LacaProbe {
    fn num_params(&self) -> usize {
        self.slots().iter().sum()
    }
    fn param(&self, i: usize) -> f64 {
        let (s, j) = self.locate(i);
        let m = match s {
            0 => &self.w.wq,
            1 => &self.w.wk,
            2 => &self.w.wv,
            3 => &self.w.wo,
            4 => &self.z,
            5 => &self.glob,
            k => self.locals[k - 6].feature.as_ref().unwrap(),
        };
        m.as_slice().unwrap()[j]
    }
    fn set_param(&mut self, i: usize, v: f64) {
        let (s, j) = self.locate(i);
        self.slot_mut(s).as_slice_mut().unwrap()[j] = v;
    }
    fn loss(&self) -> Result<f64> {
        Ok(laca(&self.z, &self.field, &self.locals, &self.glob, &self.w)?.sum())
    }
    fn analytic_grad(&self) -> Result<Vec<f64>> {
        let (out, cache) = laca_fwd(&self.z, &self.field, &self.locals, &self.glob, &self.w)?;
        let g = row_attention_backward(&cache, &self.w, &Array2::ones(out.dim()));
        let mut flat = Vec::new();
        for (_, m) in g.weights.named() {
            flat.extend(m.iter());
        }
        flat.extend(g.dz.iter());
        for df in &g.dfeatures {
            flat.extend(df.iter());
        }
        Ok(flat)
    }
}

fn laca_probe(seed: u64, shape: GridShape, dim: usize, heads: usize, ntraj: usize) -> LacaProbe {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = AttentionWeights::random(dim, heads, &mut rng);
    let z = rand_mat(shape.len(), dim, &mut rng);
    let glob = rand_mat(3, dim, &mut rng);
    let mut trajs = Vec::new();
    let mut locals = Vec::new();
    for k in 0..ntraj {
        let steps = (0..shape.t)
            .map(|t| {
                (t % 3 != 2).then(|| {
                    (
                        (k as f64 * 0.7 + 0.3 * t as f64) % shape.w as f64,
                        (0.4 + k as f64 * 0.9) % shape.h as f64,
                    )
                })
            })
            .collect();
        trajs.push(LatentTrajectory::new(steps, format!("m{k}")));
        locals.push(LocalText::new(format!("m{k}"), "x").with_feature(rand_mat(2, dim, &mut rng)));
    }
    let params = GroundingParams {
        radius: 1.5,
        ..GroundingParams::default()
    };
    let field = build_assignment(&trajs, shape, &params).unwrap();
    LacaProbe {
        w,
        z,
        glob,
        locals,
        field,
    }
}

#[test]
fn gradcheck_laca_small_grid() {
    let mut p = laca_probe(9, GridShape::new(1, 2, 2), 4, 2, 1);
    assert!(p.field.assigned_count() > 0);
    let err = grad_check(&mut p, 1e-5).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn gradcheck_laca_and_cross_up_to_4x4x2() {
    for (seed, dim, heads, ntraj) in [(10, 8, 2, 2), (11, 6, 1, 1), (12, 8, 1, 0)] {
        let mut p = laca_probe(seed, GridShape::new(2, 4, 4), dim, heads, ntraj);
        let err = grad_check(&mut p, 1e-5).unwrap();
        assert!(err < 1e-4, "seed {seed}: max rel err {err}");
    }
}

struct SelfProbe {
    w: AttentionWeights,
    z: Mat,
}

impl SelfProbe {
    fn mats(&self) -> [&Mat; 5] {
        [&self.w.wq, &self.w.wk, &self.w.wv, &self.w.wo, &self.z]
    }
    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (s, m) in self.mats().iter().enumerate() {
            if i < m.len() {
                return (s, i);
            }
            i -= m.len();
        }
        panic!()
    }
}

impl GradCheckable for SelfProbe {
    fn num_params(&self) -> usize {
        self.mats().iter().map(|m| m.len()).sum()
    }
    fn param(&self, i: usize) -> f64 {
        let (s, j) = self.locate(i);
        self.mats()[s].as_slice().unwrap()[j]
    }
    fn set_param(&mut self, i: usize, v: f64) {
        let (s, j) = self.locate(i);
        let m = match s {
            0 => &mut self.w.wq,
            1 => &mut self.w.wk,
            2 => &mut self.w.wv,
            3 => &mut self.w.wo,
            _ => &mut self.z,
        };
        m.as_slice_mut().unwrap()[j] = v;
    }
    fn loss(&self) -> Result<f64> {
        // a non-uniform readout so the sum is not trivially insensitive
        let (out, _) = self_attention_fwd(&self.z, &self.w)?;
        Ok(out.iter().enumerate().map(|(i, v)| v * (1.0 + 0.1 * i as f64)).sum())
    }
    fn analytic_grad(&self) -> Result<Vec<f64>> {
        let (out, cache) = self_attention_fwd(&self.z, &self.w)?;
        let dout = Mat::from_shape_fn(out.dim(), |(r, c)| 1.0 + 0.1 * (r * out.ncols() + c) as f64);
        let (gw, dz) = self_attention_backward(&cache, &self.w, &dout);
        let mut flat = Vec::new();
        for (_, m) in gw.named() {
            flat.extend(m.iter());
        }
        flat.extend(dz.iter());
        Ok(flat)
    }
}

#[test]
fn gradcheck_self_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut p = SelfProbe {
        w: AttentionWeights::random(8, 2, &mut rng),
        z: rand_mat(6, 8, &mut rng),
    };
    let err = grad_check(&mut p, 1e-5).unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

#[test]
fn gradcheck_rejects_bad_eps() {
    let mut p = SoftmaxProbe {
        logits: vec![0.0; 3],
        readout: vec![1.0; 3],
    };
    assert!(grad_check(&mut p, 0.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..1000, heads in 1usize..3) {
        let p = laca_probe(seed, GridShape::new(2, 3, 3), 4 * heads, heads, 2);
        let (_, cache) = laca_fwd(&p.z, &p.field, &p.locals, &p.glob, &p.w).unwrap();
        for r in 0..p.z.nrows() {
            for h in 0..heads {
                let s: f64 = row_probs(&cache, r, h).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let (_, sc) = self_attention_fwd(&p.z, &p.w).unwrap();
        for pm in &sc.dense.probs {
            for row in pm.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }
}
