//! Building trajectory–text records from entity masks and frames.
//!
//! Entity masks are reduced to representative points, thinned by point NMS,
//! propagated through the clip by a [`Tracker`] and described by a
//! [`Labeler`]. Both are pluggable and looked up by name.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dit::Volume;
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::trajectory::{validate_trajectory, LocalText, TrackPoint, Trajectory, VideoDims};

pub const RECORD_VERSION: u32 = 1;

/// A binary foreground mask of one entity on one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityMask {
    pub frame_index: usize,
    pub entity_id: String,
    height: usize,
    width: usize,
    data: Vec<bool>,
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl PixelBox {
    /// Center of the half-open box `[x_min, x_max + 1) x [y_min, y_max + 1)`.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max + 1) as f64 / 2.0,
            (self.y_min + self.y_max + 1) as f64 / 2.0,
        )
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }
}

impl EntityMask {
    /// `data` is row-major `height x width`. At least one pixel must be set.
    pub fn new(
        frame_index: usize,
        entity_id: impl Into<String>,
        height: usize,
        width: usize,
        data: Vec<bool>,
    ) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask data has {} pixels for {height}x{width}",
                data.len()
            )));
        }
        if !data.iter().any(|&b| b) {
            return Err(Error::InvalidParam("mask has no foreground pixel".into()));
        }
        Ok(Self {
            frame_index,
            entity_id: entity_id.into(),
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        frame_index: usize,
        entity_id: impl Into<String>,
        height: usize,
        width: usize,
        f: impl Fn(usize, usize) -> bool,
    ) -> Result<Self> {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(frame_index, entity_id, height, width, data)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn bbox(&self) -> PixelBox {
        self.region_bbox(0, self.height, 0, self.width)
            .expect("mask is non-empty")
    }

    /// Foreground bounds inside rows `[r0, r1)` and columns `[c0, c1)`.
    fn region_bbox(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Option<PixelBox> {
        let mut b: Option<PixelBox> = None;
        for r in r0..r1 {
            for c in c0..c1 {
                if !self.get(r, c) {
                    continue;
                }
                b = Some(match b {
                    None => PixelBox {
                        x_min: c,
                        y_min: r,
                        x_max: c,
                        y_max: r,
                    },
                    Some(p) => PixelBox {
                        x_min: p.x_min.min(c),
                        y_min: p.y_min.min(r),
                        x_max: p.x_max.max(c),
                        y_max: p.y_max.max(r),
                    },
                });
            }
        }
        b
    }

    fn count_in(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> usize {
        (r0..r1)
            .flat_map(|r| (c0..c1).map(move |c| (r, c)))
            .filter(|&(r, c)| self.get(r, c))
            .count()
    }
}

/// Greedy point NMS in a seeded random order: a point is kept iff every
/// already-kept point is farther than `radius`. Kept points come back in
/// the order they were accepted.
pub fn point_nms<R: Rng>(points: &[(f64, f64)], radius: f64, rng: &mut R) -> Result<Vec<(f64, f64)>> {
    if !(radius >= 0.0) {
        return Err(Error::InvalidParam(format!("nms radius {radius} must be >= 0")));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(rng);
    let r2 = radius * radius;
    let mut kept: Vec<(f64, f64)> = Vec::new();
    for i in order {
        let (x, y) = points[i];
        if kept.iter().all(|&(kx, ky)| (kx - x).powi(2) + (ky - y).powi(2) > r2) {
            kept.push((x, y));
        }
    }
    Ok(kept)
}

/// One partition cell of the grid path, in pixel index bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Subregion {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

/// Splits `[start, start + len)` into `n` near-equal strips.
fn strips(start: usize, len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|k| (start + k * len / n, start + (k + 1) * len / n))
        .collect()
}

/// Grid partition of the mask's bounding box into roughly square cells of
/// side at most `floor(sqrt(threshold))`.
pub fn partition(mask: &EntityMask, threshold: f64) -> Vec<Subregion> {
    let side = (threshold.sqrt().floor() as usize).max(1);
    let b = mask.bbox();
    let rows = b.height().div_ceil(side);
    let cols = b.width().div_ceil(side);
    let row_strips = strips(b.y_min, b.height(), rows);
    let col_strips = strips(b.x_min, b.width(), cols);
    row_strips
        .iter()
        .flat_map(|&r| col_strips.iter().map(move |&c| Subregion { rows: r, cols: c }))
        .collect()
}

/// Points representing one entity. Entities with fewer than
/// `threshold_frac * H * W` foreground pixels get a single point at their
/// bounding-box center; larger ones one point per occupied grid cell, at the
/// center of the cell's local foreground box.
pub fn representative_points(mask: &EntityMask, threshold_frac: f64) -> Result<Vec<(f64, f64)>> {
    if !(threshold_frac > 0.0) {
        return Err(Error::InvalidParam(format!("threshold fraction {threshold_frac} must be > 0")));
    }
    let threshold = threshold_frac * (mask.height * mask.width) as f64;
    if (mask.foreground_count() as f64) < threshold {
        return Ok(vec![mask.bbox().center()]);
    }
    Ok(partition(mask, threshold)
        .into_iter()
        .filter_map(|s| mask.region_bbox(s.rows.0, s.rows.1, s.cols.0, s.cols.1))
        .map(|b| b.center())
        .collect())
}

/// Foreground pixel counts of the grid cells, for coverage checks.
pub fn subregion_counts(mask: &EntityMask, threshold_frac: f64) -> Vec<usize> {
    let threshold = threshold_frac * (mask.height * mask.width) as f64;
    partition(mask, threshold)
        .into_iter()
        .map(|s| mask.count_in(s.rows.0, s.rows.1, s.cols.0, s.cols.1))
        .collect()
}

/// Generator-side truth for one object, available to oracle strategies.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTruth {
    /// Pixel-space center per frame.
    pub centers: Vec<(f64, f64)>,
    pub visible: Vec<bool>,
    /// Extent used to associate seed points with the object.
    pub radius: f64,
    pub phrase: String,
}

/// Frames of a clip (`[t, row, col, channel]`, pixel space) plus optional
/// ground truth.
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Volume,
    pub truth: Option<Vec<ObjectTruth>>,
}

impl Clip {
    pub fn frame_count(&self) -> usize {
        self.frames.dim().0
    }

    pub fn size(&self) -> (usize, usize) {
        let (_, h, w, _) = self.frames.dim();
        (h, w)
    }

    fn in_frame(&self, x: f64, y: f64) -> bool {
        let (h, w) = self.size();
        x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64
    }
}

/// Propagates seed points through a clip. Failures are per point.
pub trait Tracker: Send + Sync {
    fn track(&self, clip: &Clip, seeds: &[(f64, f64)]) -> Vec<Result<Vec<TrackPoint>>>;
}

/// Describes the entity under a point.
pub trait Labeler: Send + Sync {
    fn label(&self, clip: &Clip, frame: usize, point: (f64, f64)) -> Result<String>;
}

pub type TrackerRegistry = Registry<dyn Tracker>;
pub type LabelerRegistry = Registry<dyn Labeler>;

fn nearest_object(truth: &[ObjectTruth], frame: usize, (x, y): (f64, f64)) -> Option<usize> {
    truth
        .iter()
        .enumerate()
        .filter(|(_, o)| o.visible.get(frame).copied().unwrap_or(false))
        .map(|(i, o)| {
            let (cx, cy) = o.centers[frame];
            (i, ((cx - x).powi(2) + (cy - y).powi(2)).sqrt(), o.radius)
        })
        .filter(|&(_, d, r)| d <= r)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _, _)| i)
}

/// Moves each seed rigidly with the object it lands on, using the clip's
/// ground truth.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleTracker;

impl Tracker for OracleTracker {
    fn track(&self, clip: &Clip, seeds: &[(f64, f64)]) -> Vec<Result<Vec<TrackPoint>>> {
        seeds
            .iter()
            .enumerate()
            .map(|(index, &seed)| {
                let truth = clip.truth.as_ref().ok_or_else(|| Error::Tracker {
                    index,
                    reason: "clip carries no ground truth".into(),
                })?;
                let k = nearest_object(truth, 0, seed).ok_or_else(|| Error::Tracker {
                    index,
                    reason: format!("seed {seed:?} is not on any object"),
                })?;
                let o = &truth[k];
                let (c0x, c0y) = o.centers[0];
                Ok((0..clip.frame_count())
                    .map(|t| {
                        let (cx, cy) = o.centers[t];
                        let (x, y) = (seed.0 + cx - c0x, seed.1 + cy - c0y);
                        TrackPoint {
                            x,
                            y,
                            visible: o.visible[t] && clip.in_frame(x, y),
                        }
                    })
                    .collect())
            })
            .collect()
    }
}

/// Returns the phrase of the object under the point.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleLabeler;

impl Labeler for OracleLabeler {
    fn label(&self, clip: &Clip, frame: usize, point: (f64, f64)) -> Result<String> {
        let truth = clip
            .truth
            .as_ref()
            .ok_or_else(|| Error::InvalidParam("oracle labeler needs ground truth".into()))?;
        nearest_object(truth, frame, point)
            .map(|k| truth[k].phrase.clone())
            .ok_or_else(|| Error::InvalidParam(format!("no object under {point:?} on frame {frame}")))
    }
}

pub const CHANNEL_COLORS: [&str; 3] = ["red", "green", "blue"];

/// Names the dominant channel at the point's pixel.
#[derive(Debug, Clone, Copy, Default)]
pub struct ColorLabeler;

impl Labeler for ColorLabeler {
    fn label(&self, clip: &Clip, frame: usize, (x, y): (f64, f64)) -> Result<String> {
        if !clip.in_frame(x, y) || frame >= clip.frame_count() {
            return Err(Error::InvalidParam(format!("point ({x}, {y}) outside frame {frame}")));
        }
        let (r, c) = (y as usize, x as usize);
        let px = clip.frames.slice(ndarray::s![frame, r, c, ..]);
        let best = px
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        let color = CHANNEL_COLORS.get(best).copied().unwrap_or("gray");
        Ok(format!("{color} blob"))
    }
}

pub fn default_labelers() -> LabelerRegistry {
    let mut r: LabelerRegistry = Registry::new("labeler");
    r.register("oracle", Box::new(OracleLabeler));
    r.register("color", Box::new(ColorLabeler));
    r
}

/// On-disk form of one trajectory: text plus `[x, y, visible]` per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub text: String,
    pub pts: Vec<(f64, f64, u8)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordDims {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
}

/// One annotated video: a caption and its text-bound trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub version: u32,
    pub caption: String,
    pub dims: RecordDims,
    pub tracks: Vec<TrackRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<BTreeMap<String, String>>,
}

impl DatasetRecord {
    /// Trajectories with ids `t0, t1, ...` and their local texts.
    pub fn trajectories(&self) -> (Vec<Trajectory>, Vec<LocalText>) {
        self.tracks
            .iter()
            .enumerate()
            .map(|(k, tr)| {
                let id = format!("t{k}");
                let pts = tr
                    .pts
                    .iter()
                    .map(|&(x, y, v)| TrackPoint { x, y, visible: v != 0 })
                    .collect();
                (Trajectory::new(pts, id.clone()), LocalText::new(id, tr.text.clone()))
            })
            .unzip()
    }

    /// Checks every trajectory against the record's dimensions.
    pub fn validate(&self, dims: &VideoDims) -> Result<()> {
        if (dims.frames, dims.height_px, dims.width_px) != (self.dims.frames, self.dims.h, self.dims.w) {
            return Err(Error::Shape(format!(
                "record dims {:?} disagree with {dims:?}",
                self.dims
            )));
        }
        for (k, tr) in self.trajectories().0.iter().enumerate() {
            let mut report = validate_trajectory(tr, dims);
            if !report.is_empty() {
                report.trajectory = Some(k);
                return Err(Error::InvalidTrajectory(report));
            }
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(line)?;
        if r.version != RECORD_VERSION {
            return Err(Error::Config(format!("unsupported record version {}", r.version)));
        }
        Ok(r)
    }
}

/// Assembles and validates a record; `labels[k]` describes `tracked[k]`.
pub fn build_record(
    caption: &str,
    tracked: &[Vec<TrackPoint>],
    labels: &[String],
    dims: &VideoDims,
) -> Result<DatasetRecord> {
    if tracked.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} tracks but {} labels",
            tracked.len(),
            labels.len()
        )));
    }
    let record = DatasetRecord {
        version: RECORD_VERSION,
        caption: caption.into(),
        dims: RecordDims {
            frames: dims.frames,
            h: dims.height_px,
            w: dims.width_px,
        },
        tracks: tracked
            .iter()
            .zip(labels)
            .map(|(pts, text)| TrackRecord {
                text: text.clone(),
                pts: pts.iter().map(|p| (p.x, p.y, p.visible as u8)).collect(),
            })
            .collect(),
        meta: None,
    };
    record.validate(dims)?;
    Ok(record)
}

pub fn write_jsonl<W: Write>(mut out: W, records: &[DatasetRecord]) -> Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line()?)?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<DatasetRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(DatasetRecord::from_json_line(&line)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateParams {
    pub nms_radius: f64,
    pub threshold_frac: f64,
    /// Keep at most this many tracks per clip, in NMS order.
    pub max_tracks: usize,
}

impl Default for AnnotateParams {
    fn default() -> Self {
        Self {
            nms_radius: 32.0,
            threshold_frac: 0.01,
            max_tracks: 40,
        }
    }
}

/// Full pipeline for one clip: representative points of every first-frame
/// mask, NMS, tracking and labeling. Seeds the tracker fails on are skipped
/// and counted in the record metadata.
pub fn annotate_clip<R: Rng>(
    clip: &Clip,
    masks: &[EntityMask],
    caption: &str,
    dims: &VideoDims,
    tracker: &dyn Tracker,
    labeler: &dyn Labeler,
    params: &AnnotateParams,
    rng: &mut R,
) -> Result<DatasetRecord> {
    let mut candidates = Vec::new();
    for m in masks {
        candidates.extend(representative_points(m, params.threshold_frac)?);
    }
    let mut seeds = point_nms(&candidates, params.nms_radius, rng)?;
    seeds.truncate(params.max_tracks);
    let mut tracked = Vec::new();
    let mut labels = Vec::new();
    let mut failed = 0usize;
    for (res, &seed) in tracker.track(clip, &seeds).into_iter().zip(&seeds) {
        match res.and_then(|pts| Ok((pts, labeler.label(clip, 0, seed)?))) {
            Ok((pts, label)) => {
                tracked.push(pts);
                labels.push(label);
            }
            Err(_) => failed += 1,
        }
    }
    let mut record = build_record(caption, &tracked, &labels, dims)?;
    let mut meta = BTreeMap::new();
    meta.insert("seeds".into(), seeds.len().to_string());
    meta.insert("tracker_failures".into(), failed.to_string());
    record.meta = Some(meta);
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob_mask(h: usize, w: usize, cells: &[(usize, usize)]) -> EntityMask {
        EntityMask::from_fn(0, "e", h, w, |r, c| cells.contains(&(r, c))).unwrap()
    }

    #[test]
    fn nms_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(point_nms(&[(0.0, 0.0), (10.0, 0.0)], 32.0, &mut rng).unwrap().len(), 1);
        assert_eq!(point_nms(&[(0.0, 0.0), (50.0, 0.0)], 32.0, &mut rng).unwrap().len(), 2);
        let pts: Vec<(f64, f64)> = (0..100).map(|_| (rng.gen(), rng.gen())).collect();
        assert_eq!(point_nms(&pts, 0.0, &mut rng).unwrap().len(), 100);
        assert!(point_nms(&pts, -1.0, &mut rng).is_err());
    }

    #[test]
    fn nms_is_seeded() {
        let pts: Vec<(f64, f64)> = (0..30).map(|i| ((i * 7 % 13) as f64, (i % 5) as f64)).collect();
        let a = point_nms(&pts, 3.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = point_nms(&pts, 3.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_entity_is_one_point() {
        let cells: Vec<(usize, usize)> = (0..10).map(|i| (40 + i / 5, 20 + i % 5)).collect();
        let mask = blob_mask(100, 100, &cells);
        let pts = representative_points(&mask, 0.01).unwrap();
        assert_eq!(pts, vec![(22.5, 41.0)]);
    }

    #[test]
    fn full_frame_grid() {
        let mask = EntityMask::from_fn(0, "e", 100, 100, |_, _| true).unwrap();
        let pts = representative_points(&mask, 0.01).unwrap();
        assert_eq!(pts.len(), 100);
        assert!(pts.iter().all(|&(x, y)| (0.0..100.0).contains(&x) && (0.0..100.0).contains(&y)));
        assert!(subregion_counts(&mask, 0.01).iter().all(|&c| c <= 100));
    }

    #[test]
    fn threshold_is_strict() {
        // 100 pixels in a 100x100 frame: exactly at the threshold
        let cells: Vec<(usize, usize)> = (0..100).map(|i| (i / 20, i % 20)).collect();
        let mask = blob_mask(100, 100, &cells);
        let pts = representative_points(&mask, 0.01).unwrap();
        assert!(pts.len() > 1);
        let below = blob_mask(100, 100, &cells[..99]);
        assert_eq!(representative_points(&below, 0.01).unwrap().len(), 1);
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(EntityMask::new(0, "e", 2, 2, vec![false; 4]).is_err());
        assert!(EntityMask::new(0, "e", 2, 2, vec![true; 3]).is_err());
    }

    fn translating_clip(frames: usize, step: (f64, f64), start: (f64, f64), size: usize) -> Clip {
        let centers: Vec<(f64, f64)> = (0..frames)
            .map(|t| (start.0 + step.0 * t as f64, start.1 + step.1 * t as f64))
            .collect();
        let visible = centers
            .iter()
            .map(|&(x, y)| x >= 0.0 && y >= 0.0 && x < size as f64 && y < size as f64)
            .collect();
        Clip {
            frames: Volume::zeros((frames, size, size, 3)),
            truth: Some(vec![ObjectTruth {
                centers,
                visible,
                radius: 3.0,
                phrase: "red circle".into(),
            }]),
        }
    }

    #[test]
    fn oracle_tracker_follows_translation() {
        let clip = translating_clip(6, (1.0, 1.0), (4.5, 4.5), 32);
        let out = OracleTracker.track(&clip, &[(4.5, 4.5), (5.5, 4.0)]);
        let a = out[0].as_ref().unwrap();
        assert_eq!(a[0], TrackPoint::visible(4.5, 4.5));
        for t in 1..6 {
            assert_eq!(a[t].x - a[t - 1].x, 1.0);
            assert_eq!(a[t].y - a[t - 1].y, 1.0);
            assert!(a[t].visible);
        }
        assert_eq!(out[1].as_ref().unwrap()[0], TrackPoint::visible(5.5, 4.0));
    }

    #[test]
    fn oracle_tracker_exit_and_static() {
        let clip = translating_clip(8, (3.0, 0.0), (2.5, 8.5), 16);
        // center leaves at frame 5 (x = 17.5)
        let tr = OracleTracker.track(&clip, &[(2.5, 8.5)]).remove(0).unwrap();
        assert!(tr[..5].iter().all(|p| p.visible));
        assert!(tr[5..].iter().all(|p| !p.visible));

        let still = translating_clip(4, (0.0, 0.0), (6.0, 6.0), 16);
        let tr = OracleTracker.track(&still, &[(6.5, 5.5)]).remove(0).unwrap();
        assert!(tr.iter().all(|p| *p == TrackPoint::visible(6.5, 5.5)));
    }

    #[test]
    fn tracker_failures_are_per_point() {
        let clip = translating_clip(3, (0.0, 0.0), (6.0, 6.0), 16);
        let out = OracleTracker.track(&clip, &[(6.0, 6.0), (15.0, 15.0)]);
        assert!(out[0].is_ok());
        assert!(matches!(out[1], Err(Error::Tracker { index: 1, .. })));
    }

    #[test]
    fn color_labeler_reads_dominant_channel() {
        let mut clip = translating_clip(1, (0.0, 0.0), (2.0, 2.0), 4);
        clip.frames[[0, 1, 3, 2]] = 0.9;
        assert_eq!(ColorLabeler.label(&clip, 0, (3.2, 1.7)).unwrap(), "blue blob");
        assert!(ColorLabeler.label(&clip, 0, (4.0, 0.0)).is_err());
        assert_eq!(OracleLabeler.label(&clip, 0, (2.5, 2.5)).unwrap(), "red circle");
    }

    fn dims() -> VideoDims {
        VideoDims::new(3, 16, 16, 2, 1).unwrap()
    }

    #[test]
    fn record_round_trip_and_validation() {
        let tracks = vec![vec![
            TrackPoint::visible(1.25, 2.0),
            TrackPoint::hidden(-3.0, 40.0),
            TrackPoint::visible(0.1 + 0.2, 15.999),
        ]];
        let r = build_record("a red circle", &tracks, &["red circle".into()], &dims()).unwrap();
        let line = r.to_json_line().unwrap();
        assert_eq!(DatasetRecord::from_json_line(&line).unwrap(), r);
        assert!(line.contains(r#""pts":[[1.25,2.0,1],[-3.0,40.0,0],"#));

        let empty = build_record("only a caption", &[], &[], &dims()).unwrap();
        assert!(empty.tracks.is_empty());

        let bad = vec![vec![
            TrackPoint::visible(1.0, 1.0),
            TrackPoint::visible(1.0, 1.0),
            TrackPoint::visible(16.0, 1.0),
        ]];
        match build_record("x", &bad, &["y".into()], &dims()) {
            Err(Error::InvalidTrajectory(rep)) => {
                assert_eq!(rep.out_of_bounds_frames(), vec![2]);
                assert_eq!(rep.trajectory, Some(0));
            }
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_io() {
        let r = build_record("c", &[], &[], &dims()).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[r.clone(), r.clone()]).unwrap();
        let back = read_jsonl(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, vec![r.clone(), r]);
        assert!(DatasetRecord::from_json_line(r#"{"version":9,"caption":"","dims":{"frames":1,"h":1,"w":1},"tracks":[]}"#).is_err());
    }

    #[test]
    fn annotate_clip_end_to_end() {
        let clip = translating_clip(3, (1.0, 0.0), (6.5, 6.5), 16);
        let mask = EntityMask::from_fn(0, "e", 16, 16, |r, c| (5..8).contains(&r) && (5..8).contains(&c)).unwrap();
        let params = AnnotateParams {
            nms_radius: 2.0,
            threshold_frac: 0.01,
            max_tracks: 40,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = VideoDims::new(3, 16, 16, 2, 1).unwrap();
        let rec = annotate_clip(&clip, &[mask], "a red circle", &dims, &OracleTracker, &OracleLabeler, &params, &mut rng).unwrap();
        assert!(!rec.tracks.is_empty());
        assert!(rec.tracks.iter().all(|t| t.text == "red circle"));
        assert_eq!(rec.meta.as_ref().unwrap()["tracker_failures"], "0");
    }
}
