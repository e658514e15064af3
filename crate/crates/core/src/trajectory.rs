//! Point trajectories in pixel space and their projection onto the latent
//! token grid.
//!
//! Pixel coordinates are continuous: pixel column `p` spans `[p, p + 1)`, so a
//! visible point must satisfy `0 <= x < width_px` and `0 <= y < height_px`.
//! Latent coordinates are pixel coordinates divided by the spatial scale and
//! are kept real-valued so the grounding kernel sees sub-token positions.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl TrackPoint {
    pub fn visible(x: f64, y: f64) -> Self {
        Self { x, y, visible: true }
    }

    pub fn hidden(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            visible: false,
        }
    }
}

/// One point per video frame plus the id of the local text describing the
/// entity that moves along it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrackPoint>,
    pub local_text_id: String,
}

/// What a frame-0-only trajectory does on the remaining frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StaticHold {
    #[default]
    Hold,
    Invisible,
}

impl Trajectory {
    pub fn new(points: Vec<TrackPoint>, local_text_id: impl Into<String>) -> Self {
        Self {
            points,
            local_text_id: local_text_id.into(),
        }
    }

    /// A static point given on frame 0 only.
    pub fn static_point(
        x: f64,
        y: f64,
        frames: usize,
        local_text_id: impl Into<String>,
        hold: StaticHold,
    ) -> Self {
        let points = (0..frames)
            .map(|f| match (f, hold) {
                (0, _) | (_, StaticHold::Hold) => TrackPoint::visible(x, y),
                (_, StaticHold::Invisible) => TrackPoint::hidden(x, y),
            })
            .collect();
        Self::new(points, local_text_id)
    }

    pub fn first_visible(&self) -> Option<(usize, TrackPoint)> {
        self.points
            .iter()
            .copied()
            .enumerate()
            .find(|(_, p)| p.visible)
    }

    pub fn visible_count(&self) -> usize {
        self.points.iter().filter(|p| p.visible).count()
    }
}

/// A local text description. `feature` is the encoded token matrix
/// (`tokens x D`), attached once the text has been embedded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalText {
    pub id: String,
    pub text: String,
    #[serde(skip)]
    pub feature: Option<Array2<f64>>,
}

impl LocalText {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            feature: None,
        }
    }

    pub fn with_feature(mut self, feature: Array2<f64>) -> Self {
        self.feature = Some(feature);
        self
    }

    /// Checks the feature width against the model embedding width.
    pub fn check_width(&self, dim: usize) -> Result<()> {
        match &self.feature {
            Some(f) if f.ncols() != dim => Err(Error::Shape(format!(
                "local text `{}` feature width {} != model width {dim}",
                self.id,
                f.ncols()
            ))),
            _ => Ok(()),
        }
    }
}

/// Pixel-space video extent and its mapping onto the latent token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoDims {
    pub frames: usize,
    pub height_px: usize,
    pub width_px: usize,
    pub latent_t: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub spatial_scale: usize,
    pub temporal_scale: usize,
}

impl VideoDims {
    /// Derives the latent extents as ceilings of the pixel extents.
    pub fn new(
        frames: usize,
        height_px: usize,
        width_px: usize,
        spatial_scale: usize,
        temporal_scale: usize,
    ) -> Result<Self> {
        if spatial_scale == 0 || temporal_scale == 0 {
            return Err(Error::InvalidParam("scales must be positive".into()));
        }
        if frames == 0 || height_px == 0 || width_px == 0 {
            return Err(Error::InvalidParam("video extents must be positive".into()));
        }
        Ok(Self {
            frames,
            height_px,
            width_px,
            latent_t: frames.div_ceil(temporal_scale),
            latent_h: height_px.div_ceil(spatial_scale),
            latent_w: width_px.div_ceil(spatial_scale),
            spatial_scale,
            temporal_scale,
        })
    }

    pub fn check(&self) -> Result<()> {
        let ceil_ok = |latent: usize, px: usize, s: usize| {
            s > 0 && latent * s >= px && px + s > latent * s
        };
        if ceil_ok(self.latent_t, self.frames, self.temporal_scale)
            && ceil_ok(self.latent_h, self.height_px, self.spatial_scale)
            && ceil_ok(self.latent_w, self.width_px, self.spatial_scale)
        {
            Ok(())
        } else {
            Err(Error::InvalidParam(format!(
                "inconsistent latent extents in {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LengthMismatch { expected: usize, found: usize },
    OutOfBounds { frame: usize, x: f64, y: f64 },
    NonFinite { frame: usize },
    NoVisiblePoint,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::LengthMismatch { expected, found } => {
                write!(f, "length mismatch: expected {expected} frames, found {found}")
            }
            Violation::OutOfBounds { frame, x, y } => {
                write!(f, "frame {frame}: visible point ({x}, {y}) out of bounds")
            }
            Violation::NonFinite { frame } => write!(f, "frame {frame}: non-finite coordinate"),
            Violation::NoVisiblePoint => write!(f, "no visible point"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    /// Index of the offending trajectory inside a record, when known.
    pub trajectory: Option<usize>,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_length_mismatch(&self) -> bool {
        self.violations
            .iter()
            .any(|v| matches!(v, Violation::LengthMismatch { .. }))
    }

    pub fn out_of_bounds_frames(&self) -> Vec<usize> {
        self.violations
            .iter()
            .filter_map(|v| match v {
                Violation::OutOfBounds { frame, .. } => Some(*frame),
                _ => None,
            })
            .collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(k) = self.trajectory {
            write!(f, "trajectory {k}: ")?;
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Lists every violated trajectory invariant. Never fails.
pub fn validate_trajectory(traj: &Trajectory, dims: &VideoDims) -> ValidationReport {
    let mut violations = Vec::new();
    if traj.points.len() != dims.frames {
        violations.push(Violation::LengthMismatch {
            expected: dims.frames,
            found: traj.points.len(),
        });
    }
    for (frame, p) in traj.points.iter().enumerate() {
        if !p.x.is_finite() || !p.y.is_finite() {
            violations.push(Violation::NonFinite { frame });
            continue;
        }
        if p.visible
            && !(p.x >= 0.0
                && p.x < dims.width_px as f64
                && p.y >= 0.0
                && p.y < dims.height_px as f64)
        {
            violations.push(Violation::OutOfBounds {
                frame,
                x: p.x,
                y: p.y,
            });
        }
    }
    if traj.visible_count() == 0 {
        violations.push(Violation::NoVisiblePoint);
    }
    ValidationReport {
        trajectory: None,
        violations,
    }
}

/// A trajectory resampled onto latent timesteps; `None` marks an invisible
/// step. Coordinates are in latent-grid units.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    pub steps: Vec<Option<(f64, f64)>>,
    pub local_text_id: String,
}

impl LatentTrajectory {
    pub fn new(steps: Vec<Option<(f64, f64)>>, local_text_id: impl Into<String>) -> Self {
        Self {
            steps,
            local_text_id: local_text_id.into(),
        }
    }
}

/// Projects a pixel trajectory onto the latent grid. Frames sharing a latent
/// step are merged: visible if any source frame is, positioned at the mean
/// of the visible source coordinates.
pub fn to_latent(traj: &Trajectory, dims: &VideoDims) -> Result<LatentTrajectory> {
    let report = validate_trajectory(traj, dims);
    if !report.is_empty() {
        return Err(Error::InvalidTrajectory(report));
    }
    let s = dims.spatial_scale as f64;
    let steps = (0..dims.latent_t)
        .map(|tau| {
            let lo = tau * dims.temporal_scale;
            let hi = (lo + dims.temporal_scale).min(dims.frames);
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
            for p in traj.points[lo..hi].iter().filter(|p| p.visible) {
                sx += p.x / s;
                sy += p.y / s;
                n += 1;
            }
            (n > 0).then(|| (sx / n as f64, sy / n as f64))
        })
        .collect();
    Ok(LatentTrajectory::new(steps, traj.local_text_id.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(frames: usize, ss: usize, ts: usize) -> VideoDims {
        VideoDims::new(frames, 64, 64, ss, ts).unwrap()
    }

    fn line(frames: usize) -> Trajectory {
        let pts = (0..frames)
            .map(|f| TrackPoint::visible(4.0 + f as f64, 10.0))
            .collect();
        Trajectory::new(pts, "m0")
    }

    #[test]
    fn well_formed_trajectory_has_empty_report() {
        assert!(validate_trajectory(&line(8), &dims(8, 8, 1)).is_empty());
    }

    #[test]
    fn short_trajectory_reports_length_mismatch() {
        let r = validate_trajectory(&line(7), &dims(8, 8, 1));
        assert!(r.has_length_mismatch());
    }

    #[test]
    fn right_edge_is_exclusive() {
        let mut t = line(8);
        t.points[3].x = 64.0;
        let r = validate_trajectory(&t, &dims(8, 8, 1));
        assert_eq!(r.out_of_bounds_frames(), vec![3]);
    }

    #[test]
    fn invisible_points_may_leave_the_frame() {
        let mut t = line(8);
        t.points[3] = TrackPoint::hidden(-5.0, 99.0);
        assert!(validate_trajectory(&t, &dims(8, 8, 1)).is_empty());
    }

    #[test]
    fn all_hidden_is_reported() {
        let t = Trajectory::new(vec![TrackPoint::hidden(1.0, 1.0); 8], "m");
        let r = validate_trajectory(&t, &dims(8, 8, 1));
        assert!(r.violations.contains(&Violation::NoVisiblePoint));
    }

    #[test]
    fn latent_extents_are_ceilings() {
        let d = VideoDims::new(81, 480, 832, 16, 4).unwrap();
        assert_eq!((d.latent_t, d.latent_h, d.latent_w), (21, 30, 52));
        d.check().unwrap();
        let bad = VideoDims { latent_h: 31, ..d };
        assert!(bad.check().is_err());
    }

    #[test]
    fn exact_division_to_latent() {
        let t = Trajectory::new(vec![TrackPoint::visible(16.0, 8.0)], "m");
        let d = VideoDims::new(1, 64, 64, 8, 1).unwrap();
        let l = to_latent(&t, &d).unwrap();
        assert_eq!(l.steps, vec![Some((2.0, 1.0))]);
    }

    #[test]
    fn temporal_merge_averages_visible_points() {
        let pts = vec![
            TrackPoint::visible(8.0, 8.0),
            TrackPoint::visible(16.0, 8.0),
            TrackPoint::hidden(0.0, 0.0),
            TrackPoint::visible(24.0, 8.0),
        ];
        let t = Trajectory::new(pts, "m");
        let l = to_latent(&t, &dims(4, 8, 4)).unwrap();
        assert_eq!(l.steps.len(), 1);
        let (x, y) = l.steps[0].unwrap();
        assert_eq!(x, 2.0);
        assert_eq!(y, 1.0);
    }

    #[test]
    fn fully_hidden_latent_step_is_invisible() {
        let mut pts = vec![TrackPoint::visible(8.0, 8.0); 8];
        for p in &mut pts[4..] {
            p.visible = false;
        }
        let l = to_latent(&Trajectory::new(pts, "m"), &dims(8, 8, 4)).unwrap();
        assert!(l.steps[0].is_some());
        assert!(l.steps[1].is_none());
    }

    #[test]
    fn to_latent_rejects_invalid() {
        assert!(matches!(
            to_latent(&line(7), &dims(8, 8, 1)),
            Err(Error::InvalidTrajectory(_))
        ));
    }

    #[test]
    fn static_point_holds_by_default() {
        let t = Trajectory::static_point(3.0, 4.0, 5, "m", StaticHold::default());
        assert_eq!(t.visible_count(), 5);
        assert!(t.points.iter().all(|p| p.x == 3.0 && p.y == 4.0));
        let t = Trajectory::static_point(3.0, 4.0, 5, "m", StaticHold::Invisible);
        assert_eq!(t.visible_count(), 1);
    }

    #[test]
    fn feature_width_checked() {
        let lt = LocalText::new("a", "red circle").with_feature(Array2::zeros((2, 4)));
        assert!(lt.check_width(4).is_ok());
        assert!(lt.check_width(8).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_traj(frames: usize) -> impl Strategy<Value = Trajectory> {
            proptest::collection::vec((0.0..64.0f64, 0.0..64.0f64, any::<bool>()), frames)
                .prop_map(|v| {
                    let mut pts: Vec<TrackPoint> = v
                        .into_iter()
                        .map(|(x, y, vis)| TrackPoint { x, y, visible: vis })
                        .collect();
                    pts[0].visible = true;
                    Trajectory::new(pts, "m")
                })
        }

        proptest! {
            #[test]
            fn unit_scales_are_identity(t in arb_traj(6)) {
                let d = VideoDims::new(6, 64, 64, 1, 1).unwrap();
                let l = to_latent(&t, &d).unwrap();
                for (p, s) in t.points.iter().zip(&l.steps) {
                    if p.visible {
                        prop_assert_eq!(*s, Some((p.x, p.y)));
                    } else {
                        prop_assert!(s.is_none());
                    }
                }
            }

            #[test]
            fn latent_visibility_is_or(t in arb_traj(8), ts in 1usize..5) {
                let d = VideoDims::new(8, 64, 64, 4, ts).unwrap();
                let l = to_latent(&t, &d).unwrap();
                for (tau, s) in l.steps.iter().enumerate() {
                    let lo = tau * ts;
                    let hi = (lo + ts).min(8);
                    let any = t.points[lo..hi].iter().any(|p| p.visible);
                    prop_assert_eq!(s.is_some(), any);
                }
            }

            #[test]
            fn single_frame_round_trip_bound(t in arb_traj(5), s in 1usize..9) {
                let d = VideoDims::new(5, 64, 64, s, 1).unwrap();
                let l = to_latent(&t, &d).unwrap();
                for (p, st) in t.points.iter().zip(&l.steps) {
                    if let (true, Some((lx, ly))) = (p.visible, st) {
                        prop_assert!((p.x - lx * s as f64).abs() < s as f64);
                        prop_assert!((p.y - ly * s as f64).abs() < s as f64);
                    }
                }
            }
        }
    }
}
