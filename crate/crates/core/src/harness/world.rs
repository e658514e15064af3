use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{
    annotate_clip, build_record, AnnotateParams, Clip, DatasetRecord, EntityMask, ObjectTruth, OracleLabeler,
    OracleTracker, CHANNEL_COLORS,
};
use crate::dit::Volume;
use crate::error::{Error, Result};
use crate::trajectory::{TrackPoint, VideoDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Linear,
    Circular,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
}

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlobWorldConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Range of the bump's Gaussian width in pixels.
    pub size_range: [f64; 2],
    /// Pixels per frame.
    pub max_speed: f64,
    pub motions: Vec<Motion>,
    /// Colour words; each must name a channel.
    pub colors: Vec<String>,
    pub shapes: Vec<Shape>,
    /// Minimum center distance between blobs on frames where both are visible.
    pub min_separation: f64,
    /// Whether linear movers may leave the frame.
    pub allow_exit: bool,
}

impl Default for BlobWorldConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
            channels: 3,
            min_blobs: 1,
            max_blobs: 2,
            size_range: [1.0, 1.4],
            max_speed: 1.0,
            motions: vec![Motion::Linear, Motion::Circular, Motion::Static],
            colors: CHANNEL_COLORS.iter().map(|c| c.to_string()).collect(),
            shapes: vec![Shape::Circle, Shape::Square],
            min_separation: 5.0,
            allow_exit: true,
        }
    }
}

const MAX_PLACEMENT_TRIES: usize = 200;

impl BlobWorldConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.height < 4 || self.width < 4 || self.channels == 0 {
            return bad("world extents too small".into());
        }
        if self.min_blobs == 0 || self.min_blobs > self.max_blobs {
            return bad(format!("blob count range {}..={} invalid", self.min_blobs, self.max_blobs));
        }
        if self.colors.is_empty() || self.shapes.is_empty() || self.motions.is_empty() {
            return bad("colour, shape and motion vocabularies must be nonempty".into());
        }
        for c in &self.colors {
            match channel_of(c) {
                Some(ch) if ch < self.channels => {}
                _ => return bad(format!("colour `{c}` has no channel among {}", self.channels)),
            }
        }
        let [lo, hi] = self.size_range;
        if !(lo > 0.0 && lo <= hi) || !(self.max_speed >= 0.0) || !(self.min_separation >= 0.0) {
            return bad("size range, speed and separation must be nonnegative and ordered".into());
        }
        if 2.0 * hi >= self.height.min(self.width) as f64 {
            return bad("blobs do not fit the frame".into());
        }
        Ok(())
    }

    pub fn video_shape(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }
}

fn channel_of(color: &str) -> Option<usize> {
    CHANNEL_COLORS.iter().position(|c| *c == color)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub color: String,
    pub shape: Shape,
    pub size: f64,
    pub motion: Motion,
    /// Center per frame in continuous pixel coordinates.
    pub centers: Vec<(f64, f64)>,
}

impl BlobSpec {
    pub fn phrase(&self) -> String {
        format!("{} {}", self.color, self.shape.word())
    }

    /// Bump intensity at pixel `(row, col)` on frame `t`.
    pub fn intensity(&self, t: usize, row: usize, col: usize) -> f64 {
        let (cx, cy) = self.centers[t];
        let (dx, dy) = (col as f64 + 0.5 - cx, row as f64 + 0.5 - cy);
        let d = match self.shape {
            Shape::Circle => (dx * dx + dy * dy).sqrt(),
            Shape::Square => dx.abs().max(dy.abs()),
        };
        (-0.5 * (d / self.size).powi(2)).exp()
    }
}

/// One generated clip: pixels in `[0, 1]`, the blobs that made it, and its
/// sparse record (one center track per blob).
#[derive(Debug, Clone)]
pub struct WorldSample {
    pub video: Volume,
    pub blobs: Vec<BlobSpec>,
    pub record: DatasetRecord,
}

impl WorldSample {
    pub fn truth(&self) -> Vec<ObjectTruth> {
        let (_, h, w, _) = self.video.dim();
        self.blobs
            .iter()
            .map(|b| ObjectTruth {
                centers: b.centers.clone(),
                visible: b.centers.iter().map(|&(x, y)| in_frame(x, y, h, w)).collect(),
                radius: 2.5 * b.size,
                phrase: b.phrase(),
            })
            .collect()
    }

    pub fn clip(&self) -> Clip {
        Clip {
            frames: self.video.clone(),
            truth: Some(self.truth()),
        }
    }

    /// First-frame masks: pixels where a blob's own bump reaches 0.5.
    pub fn masks(&self) -> Result<Vec<EntityMask>> {
        let (_, h, w, _) = self.video.dim();
        self.blobs
            .iter()
            .enumerate()
            .map(|(k, b)| EntityMask::from_fn(0, format!("blob{k}"), h, w, |r, c| b.intensity(0, r, c) >= 0.5))
            .collect()
    }

    /// Dense record: representative points of every blob, thinned and
    /// propagated with the ground-truth tracker.
    pub fn dense_record<R: Rng>(&self, dims: &VideoDims, params: &AnnotateParams, rng: &mut R) -> Result<DatasetRecord> {
        annotate_clip(
            &self.clip(),
            &self.masks()?,
            &self.record.caption,
            dims,
            &OracleTracker,
            &OracleLabeler,
            params,
            rng,
        )
    }
}

fn in_frame(x: f64, y: f64, h: usize, w: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64
}

pub fn caption(blobs: &[BlobSpec]) -> String {
    let parts: Vec<String> = blobs.iter().map(|b| format!("a {}", b.phrase())).collect();
    parts.join(" and ")
}

pub fn render(cfg: &BlobWorldConfig, blobs: &[BlobSpec]) -> Volume {
    let mut v = Volume::zeros(cfg.video_shape());
    for b in blobs {
        let ch = channel_of(&b.color).expect("checked colour");
        for t in 0..cfg.frames {
            for r in 0..cfg.height {
                for c in 0..cfg.width {
                    let i = b.intensity(t, r, c);
                    let px = &mut v[[t, r, c, ch]];
                    *px = px.max(i);
                }
            }
        }
    }
    v
}

fn sample_blob<R: Rng>(cfg: &BlobWorldConfig, rng: &mut R) -> BlobSpec {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let size = rng.gen_range(cfg.size_range[0]..=cfg.size_range[1]);
    let margin = 1.5 * size;
    let motion = *cfg.motions.choose(rng).expect("nonempty");
    let color = cfg.colors.choose(rng).expect("nonempty").clone();
    let shape = *cfg.shapes.choose(rng).expect("nonempty");
    let x0 = rng.gen_range(margin..w - margin);
    let y0 = rng.gen_range(margin..h - margin);
    let centers = match motion {
        Motion::Static => vec![(x0, y0); cfg.frames],
        Motion::Linear => {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let speed = rng.gen_range(0.3 * cfg.max_speed..=cfg.max_speed);
            (0..cfg.frames)
                .map(|t| {
                    let s = speed * t as f64;
                    (x0 + s * angle.cos(), y0 + s * angle.sin())
                })
                .collect()
        }
        Motion::Circular => {
            let radius = rng.gen_range(1.5..3.5);
            let omega = rng.gen_range(0.3..0.6) * if rng.gen() { 1.0 } else { -1.0 };
            let phase = rng.gen_range(0.0..2.0 * PI);
            // orbit passes through the sampled start point
            let (ox, oy) = (x0 - radius * phase.cos(), y0 - radius * phase.sin());
            (0..cfg.frames)
                .map(|t| {
                    let a = phase + omega * t as f64;
                    (ox + radius * a.cos(), oy + radius * a.sin())
                })
                .collect()
        }
    };
    BlobSpec {
        color,
        shape,
        size,
        motion,
        centers,
    }
}

fn acceptable(cfg: &BlobWorldConfig, b: &BlobSpec, others: &[BlobSpec]) -> bool {
    let (h, w) = (cfg.height, cfg.width);
    let (x0, y0) = b.centers[0];
    if !in_frame(x0, y0, h, w) {
        return false;
    }
    // circular and static blobs stay inside; linear ones may leave if allowed
    let stays = b.centers.iter().all(|&(x, y)| in_frame(x, y, h, w));
    if !stays && (b.motion != Motion::Linear || !cfg.allow_exit) {
        return false;
    }
    others.iter().all(|o| {
        (0..cfg.frames).all(|t| {
            let (a, c) = (b.centers[t], o.centers[t]);
            let both = in_frame(a.0, a.1, h, w) && in_frame(c.0, c.1, h, w);
            !both || ((a.0 - c.0).powi(2) + (a.1 - c.1).powi(2)).sqrt() >= cfg.min_separation
        })
    })
}

/// Generates one clip from its own seed.
pub fn generate_sample(cfg: &BlobWorldConfig, seed: u64) -> Result<WorldSample> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.min_blobs..=cfg.max_blobs);
    let mut blobs: Vec<BlobSpec> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let b = sample_blob(cfg, &mut rng);
            if acceptable(cfg, &b, &blobs) {
                blobs.push(b);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::World(format!(
                "could not place blob {} of {count} after {MAX_PLACEMENT_TRIES} tries",
                blobs.len() + 1
            )));
        }
    }
    let video = render(cfg, &blobs);
    let dims = world_dims(cfg, 1)?;
    let (h, w) = (cfg.height, cfg.width);
    let tracks: Vec<Vec<TrackPoint>> = blobs
        .iter()
        .map(|b| {
            b.centers
                .iter()
                .map(|&(x, y)| TrackPoint {
                    x,
                    y,
                    visible: in_frame(x, y, h, w),
                })
                .collect()
        })
        .collect();
    let labels: Vec<String> = blobs.iter().map(BlobSpec::phrase).collect();
    let record = build_record(&caption(&blobs), &tracks, &labels, &dims)?;
    Ok(WorldSample { video, blobs, record })
}

/// `n` clips; clip `i` uses the `i`-th seed drawn from `seed`.
pub fn generate_world(cfg: &BlobWorldConfig, n: usize, seed: u64) -> Result<Vec<WorldSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| generate_sample(cfg, rng.gen())).collect()
}

/// Pixel/latent mapping with the given spatial scale (temporal scale 1 for
/// pixel-only checks).
pub fn world_dims(cfg: &BlobWorldConfig, spatial_scale: usize) -> Result<VideoDims> {
    VideoDims::new(cfg.frames, cfg.height, cfg.width, spatial_scale, 1)
}
