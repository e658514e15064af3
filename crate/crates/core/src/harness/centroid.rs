use serde::{Deserialize, Serialize};

use crate::annotation::{Clip, OracleTracker, Tracker, TrackerRegistry};
use crate::error::Result;
use crate::registry::Registry;
use crate::trajectory::TrackPoint;

/// Follows the bright connected region nearest to the previous position and
/// reports its intensity-weighted centroid. Brightness is the channel
/// maximum; a frame without a bright region marks the point invisible and
/// holds its last position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentroidTracker {
    pub threshold: f64,
    /// Smaller regions are treated as noise.
    pub min_pixels: usize,
}

impl Default for CentroidTracker {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            min_pixels: 2,
        }
    }
}

struct Region {
    pixels: Vec<(usize, usize)>,
}

impl CentroidTracker {
    fn regions(&self, clip: &Clip, t: usize) -> (Vec<Region>, Vec<f64>) {
        let (h, w) = clip.size();
        let bright: Vec<f64> = (0..h * w)
            .map(|i| {
                let px = clip.frames.slice(ndarray::s![t, i / w, i % w, ..]);
                px.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        let mut seen = vec![false; h * w];
        let mut regions = Vec::new();
        for start in 0..h * w {
            if seen[start] || !(bright[start] >= self.threshold) {
                continue;
            }
            seen[start] = true;
            let mut stack = vec![start];
            let mut pixels = Vec::new();
            while let Some(i) = stack.pop() {
                let (r, c) = (i / w, i % w);
                pixels.push((r, c));
                let mut push = |j: usize| {
                    if !seen[j] && bright[j] >= self.threshold {
                        seen[j] = true;
                        stack.push(j);
                    }
                };
                if r > 0 {
                    push(i - w);
                }
                if r + 1 < h {
                    push(i + w);
                }
                if c > 0 {
                    push(i - 1);
                }
                if c + 1 < w {
                    push(i + 1);
                }
            }
            if pixels.len() >= self.min_pixels {
                pixels.sort_unstable();
                regions.push(Region { pixels });
            }
        }
        (regions, bright)
    }
}

impl Tracker for CentroidTracker {
    fn track(&self, clip: &Clip, seeds: &[(f64, f64)]) -> Vec<Result<Vec<TrackPoint>>> {
        let (_, w) = clip.size();
        let per_frame: Vec<(Vec<Region>, Vec<f64>)> =
            (0..clip.frame_count()).map(|t| self.regions(clip, t)).collect();
        seeds
            .iter()
            .map(|&seed| {
                let mut prev = seed;
                Ok(per_frame
                    .iter()
                    .map(|(regions, bright)| {
                        let dist = |&(r, c): &(usize, usize)| {
                            (c as f64 + 0.5 - prev.0).powi(2) + (r as f64 + 0.5 - prev.1).powi(2)
                        };
                        let nearest = regions
                            .iter()
                            .map(|reg| (reg, reg.pixels.iter().map(dist).fold(f64::INFINITY, f64::min)))
                            .min_by(|a, b| a.1.total_cmp(&b.1));
                        match nearest {
                            Some((reg, _)) => {
                                let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
                                for &(r, c) in &reg.pixels {
                                    let v = bright[r * w + c];
                                    sx += v * (c as f64 + 0.5);
                                    sy += v * (r as f64 + 0.5);
                                    sw += v;
                                }
                                prev = (sx / sw, sy / sw);
                                TrackPoint::visible(prev.0, prev.1)
                            }
                            None => TrackPoint::hidden(prev.0, prev.1),
                        }
                    })
                    .collect())
            })
            .collect()
    }
}

/// `oracle` (ground-truth rigid motion) and `centroid` (image based).
pub fn default_trackers() -> TrackerRegistry {
    let mut r: TrackerRegistry = Registry::new("tracker");
    r.register("oracle", Box::new(OracleTracker));
    r.register("centroid", Box::new(CentroidTracker::default()));
    r
}
