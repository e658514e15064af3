//! Trajectory-following and local-alignment metrics, and the GSB preference
//! score.

use std::fmt::Write as _;

use ndarray::{s, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::annotation::CHANNEL_COLORS;
use crate::dit::Volume;
use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::trajectory::Trajectory;

pub const DEFAULT_TAUS: [f64; 4] = [0.05, 0.10, 0.15, 0.20];

/// End-point error: mean Euclidean distance over the frames where the
/// condition track is visible.
pub fn epe(condition: &Trajectory, estimated: &Trajectory) -> Result<f64> {
    if condition.points.len() != estimated.points.len() {
        return Err(Error::Shape(format!(
            "condition track has {} frames, estimate {}",
            condition.points.len(),
            estimated.points.len()
        )));
    }
    let (sum, n) = condition
        .points
        .iter()
        .zip(&estimated.points)
        .filter(|(c, _)| c.visible)
        .fold((0.0, 0usize), |(s, n), (c, e)| {
            (s + ((c.x - e.x).powi(2) + (c.y - e.y).powi(2)).sqrt(), n + 1)
        });
    if n == 0 {
        return Err(Error::UndefinedMetric("EPE needs at least one visible frame".into()));
    }
    Ok(sum / n as f64)
}

/// Mean over tracks, then over videos. Tracks without visible frames and
/// videos without tracks do not contribute.
pub fn aggregate_epe(videos: &[Vec<(Trajectory, Trajectory)>]) -> Result<f64> {
    let per_video: Vec<f64> = videos
        .iter()
        .filter_map(|pairs| {
            let vals: Vec<f64> = pairs.iter().filter_map(|(c, e)| epe(c, e).ok()).collect();
            mean(&vals)
        })
        .collect();
    mean(&per_video).ok_or_else(|| Error::UndefinedMetric("no video has a defined EPE".into()))
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// A crop in continuous pixel coordinates, `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl CropBox {
    /// Pixel index ranges covered by the box, at least one pixel each way.
    pub fn pixel_ranges(&self, height: usize, width: usize) -> ((usize, usize), (usize, usize)) {
        let span = |lo: f64, hi: f64, n: usize| {
            let a = (lo.floor().max(0.0) as usize).min(n - 1);
            let b = (hi.ceil() as usize).clamp(a + 1, n);
            (a, b)
        };
        (span(self.y0, self.y1, height), span(self.x0, self.x1, width))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub frame: usize,
    pub tau: f64,
    pub bounds: CropBox,
}

/// Square windows of half-size `R = tau * min(H, W)` around every visible
/// point, clamped to the frame.
pub fn local_windows(height: usize, width: usize, traj: &Trajectory, taus: &[f64]) -> Result<Vec<Window>> {
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t <= 0.5)) {
        return Err(Error::InvalidParam(format!("window scale {t} outside (0, 0.5]")));
    }
    let short = height.min(width) as f64;
    let (w, h) = (width as f64, height as f64);
    Ok(traj
        .points
        .iter()
        .enumerate()
        .filter(|(_, p)| p.visible)
        .flat_map(|(frame, p)| {
            taus.iter().map(move |&tau| {
                let r = tau * short;
                Window {
                    frame,
                    tau,
                    bounds: CropBox {
                        x0: (p.x - r).clamp(0.0, w),
                        y0: (p.y - r).clamp(0.0, h),
                        x1: (p.x + r).clamp(0.0, w),
                        y1: (p.y + r).clamp(0.0, h),
                    },
                }
            })
        })
        .collect())
}

/// Joint image/text embedding used for local alignment.
pub trait Embedder: Send + Sync {
    /// `crop` is `[row, col, channel]`.
    fn embed_image(&self, crop: ArrayView3<'_, f64>) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;

    /// Cosine similarity; zero vectors score 0.
    fn similarity(&self, a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

pub type EmbedderRegistry = Registry<dyn Embedder>;

/// One-hot of the crop's dominant channel against one-hot of the colour word
/// in the text: 1 on a match, 0 otherwise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ColorEmbedder;

impl Embedder for ColorEmbedder {
    fn embed_image(&self, crop: ArrayView3<'_, f64>) -> Result<Vec<f64>> {
        let channels = crop.dim().2;
        let sums: Vec<f64> = (0..channels).map(|c| crop.slice(s![.., .., c]).sum()).collect();
        let mut out = vec![0.0; CHANNEL_COLORS.len()];
        if let Some((best, &v)) = sums.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) {
            if v > 0.0 && best < out.len() {
                out[best] = 1.0;
            }
        }
        Ok(out)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let words: Vec<&str> = text.split_whitespace().collect();
        Ok(CHANNEL_COLORS
            .iter()
            .map(|c| words.contains(c) as u8 as f64)
            .collect())
    }
}

/// Fixed vectors whose similarity is always `sim`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantEmbedder {
    pub sim: f64,
}

impl Embedder for ConstantEmbedder {
    fn embed_image(&self, _: ArrayView3<'_, f64>) -> Result<Vec<f64>> {
        Ok(vec![1.0, 0.0])
    }

    fn embed_text(&self, _: &str) -> Result<Vec<f64>> {
        let s = self.sim.clamp(-1.0, 1.0);
        Ok(vec![s, (1.0 - s * s).sqrt()])
    }
}

pub fn default_embedders() -> EmbedderRegistry {
    let mut r: EmbedderRegistry = Registry::new("embedder");
    r.register("color", Box::new(ColorEmbedder));
    r.register("constant", Box::new(ConstantEmbedder { sim: 0.3 }));
    r
}

/// Mean similarity between the local text and the windows around the
/// trajectory, jointly over (visible frame, tau).
pub fn local_alignment(
    video: &Volume,
    traj: &Trajectory,
    text: &str,
    embedder: &dyn Embedder,
    taus: &[f64],
) -> Result<f64> {
    let (frames, h, w, _) = video.dim();
    if traj.points.len() != frames {
        return Err(Error::Shape(format!(
            "trajectory has {} frames, video {frames}",
            traj.points.len()
        )));
    }
    let windows = local_windows(h, w, traj, taus)?;
    if windows.is_empty() {
        return Err(Error::UndefinedMetric("local alignment needs a visible frame".into()));
    }
    let t = embedder.embed_text(text)?;
    let mut total = 0.0;
    for win in &windows {
        let ((r0, r1), (c0, c1)) = win.bounds.pixel_ranges(h, w);
        let crop = video.slice(s![win.frame, r0..r1, c0..c1, ..]);
        total += embedder.similarity(&embedder.embed_image(crop)?, &t);
    }
    Ok(total / windows.len() as f64)
}

/// `100 (G - B) / (G + S + B)`.
pub fn gsb(g: u64, s: u64, b: u64) -> Result<f64> {
    let n = g + s + b;
    if n == 0 {
        return Err(Error::UndefinedMetric("GSB needs at least one comparison".into()));
    }
    Ok(100.0 * (g as f64 - b as f64) / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video: usize,
    pub epe: Option<f64>,
    pub local_alignment: Option<f64>,
    pub tracks: usize,
    pub visible_frames: usize,
}

/// One evaluated configuration: aggregate columns plus per-video rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub name: String,
    pub scheme: String,
    pub lambda: f64,
    #[serde(default)]
    pub notes: Vec<String>,
    pub epe: Option<f64>,
    pub local_alignment: Option<f64>,
    pub videos: Vec<VideoMetrics>,
}

impl RunMetrics {
    /// Aggregates as the mean over videos where the metric is defined.
    pub fn from_videos(name: &str, scheme: &str, lambda: f64, videos: Vec<VideoMetrics>) -> Self {
        let epes: Vec<f64> = videos.iter().filter_map(|v| v.epe).collect();
        let las: Vec<f64> = videos.iter().filter_map(|v| v.local_alignment).collect();
        let mut notes = Vec::new();
        if lambda == 0.0 {
            notes.push("base_model_equivalent".to_string());
        }
        Self {
            name: name.into(),
            scheme: scheme.into(),
            lambda,
            notes,
            epe: mean(&epes),
            local_alignment: mean(&las),
            videos,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub runs: Vec<RunMetrics>,
}

impl MetricsReport {
    pub fn run(&self, name: &str) -> Option<&RunMetrics> {
        self.runs.iter().find(|r| r.name == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:<14} {:>6} {:>10} {:>10} {:>7}  notes",
            "run", "scheme", "lambda", "epe", "local_al", "videos"
        );
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{:<24} {:<14} {:>6.2} {:>10} {:>10} {:>7}  {}",
                r.name,
                r.scheme,
                r.lambda,
                fmt(r.epe),
                fmt(r.local_alignment),
                r.videos.len(),
                r.notes.join(",")
            );
        }
        out
    }
}
