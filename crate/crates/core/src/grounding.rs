//! Per-token conditioning assignment for location-aware cross-attention.
//!
//! Every latent token `(t, row, col)` either attends to the global caption or
//! to exactly one trajectory's local text, scaled by a Gaussian weight of its
//! distance to the trajectory point. Cell coordinates handed to the kernel are
//! in `(x, y) = (col, row)` order, matching trajectory coordinates.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{LatentTrajectory, LocalText};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn len(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major `(t, row, col)` token index.
    pub fn index(&self, t: usize, row: usize, col: usize) -> usize {
        (t * self.h + row) * self.w + col
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Global,
    Local { traj: usize, weight: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentField {
    shape: GridShape,
    cells: Vec<Cell>,
}

impl AssignmentField {
    pub fn all_global(shape: GridShape) -> Self {
        Self {
            shape,
            cells: vec![Cell::Global; shape.len()],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn get(&self, t: usize, row: usize, col: usize) -> Cell {
        self.cells[self.shape.index(t, row, col)]
    }

    pub fn assigned_count(&self) -> usize {
        self.cells
            .iter()
            .filter(|c| matches!(c, Cell::Local { .. }))
            .count()
    }

    pub fn max_traj_index(&self) -> Option<usize> {
        self.cells
            .iter()
            .filter_map(|c| match c {
                Cell::Local { traj, .. } => Some(*traj),
                Cell::Global => None,
            })
            .max()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundingParams {
    /// Kernel width in latent-grid units.
    pub sigma: f64,
    /// Neighborhood radius in latent-grid units.
    pub radius: f64,
    pub gaussian_enabled: bool,
    pub neighborhood_enabled: bool,
}

impl Default for GroundingParams {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            radius: 2.0,
            gaussian_enabled: true,
            neighborhood_enabled: true,
        }
    }
}

impl GroundingParams {
    /// Point-only assignment with unit weights, as used for dense-track
    /// pretraining.
    pub fn point_only() -> Self {
        Self {
            gaussian_enabled: false,
            neighborhood_enabled: false,
            ..Self::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParam(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidParam(format!("radius must be >= 0, got {}", self.radius)));
        }
        Ok(())
    }
}

pub fn gaussian_weight(center: (f64, f64), cell: (usize, usize), sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParam(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(gaussian_unchecked(center, cell, sigma))
}

fn gaussian_unchecked(center: (f64, f64), cell: (usize, usize), sigma: f64) -> f64 {
    let dx = cell.0 as f64 - center.0;
    let dy = cell.1 as f64 - center.1;
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Builds the assignment field. Overlapping claims go to the largest weight,
/// ties to the lowest trajectory index. A claim whose weight underflows to
/// zero is dropped.
pub fn build_assignment(
    trajs: &[LatentTrajectory],
    shape: GridShape,
    params: &GroundingParams,
) -> Result<AssignmentField> {
    params.check()?;
    let mut field = AssignmentField::all_global(shape);
    for (k, traj) in trajs.iter().enumerate() {
        if traj.steps.len() != shape.t {
            return Err(Error::OutOfGrid {
                index: k,
                detail: format!("{} latent steps for a grid of {}", traj.steps.len(), shape.t),
            });
        }
        for (t, step) in traj.steps.iter().enumerate() {
            let Some((x, y)) = *step else { continue };
            if !(x >= 0.0 && x < shape.w as f64 && y >= 0.0 && y < shape.h as f64) {
                return Err(Error::OutOfGrid {
                    index: k,
                    detail: format!("step {t} at ({x}, {y}) outside {}x{}", shape.w, shape.h),
                });
            }
            let mut claim = |col: usize, row: usize| {
                let weight = if params.gaussian_enabled {
                    gaussian_unchecked((x, y), (col, row), params.sigma)
                } else {
                    1.0
                };
                if weight <= 0.0 {
                    return;
                }
                let idx = shape.index(t, row, col);
                let take = match field.cells[idx] {
                    Cell::Global => true,
                    Cell::Local { weight: w, .. } => weight > w,
                };
                if take {
                    field.cells[idx] = Cell::Local { traj: k, weight };
                }
            };
            if params.neighborhood_enabled {
                let r = params.radius;
                let col_lo = (x - r).ceil().max(0.0) as usize;
                let col_hi = ((x + r).floor() as i64).min(shape.w as i64 - 1);
                let row_lo = (y - r).ceil().max(0.0) as usize;
                let row_hi = ((y + r).floor() as i64).min(shape.h as i64 - 1);
                for row in row_lo as i64..=row_hi {
                    for col in col_lo as i64..=col_hi {
                        let dx = col as f64 - x;
                        let dy = row as f64 - y;
                        if dx * dx + dy * dy <= r * r {
                            claim(col as usize, row as usize);
                        }
                    }
                }
            } else {
                let col = (x.round() as usize).min(shape.w - 1);
                let row = (y.round() as usize).min(shape.h - 1);
                claim(col, row);
            }
        }
    }
    Ok(field)
}

/// Moves continuous latent points onto the token lattice used by
/// [`build_assignment`]. Token `c` spans `[c, c + 1)` in latent units but
/// sits at lattice position `c`, so points shift by half a token and are
/// clamped into the grid; rounding then picks the token that contains the
/// point.
pub fn to_token_lattice(traj: &LatentTrajectory, shape: GridShape) -> LatentTrajectory {
    let clamp = |v: f64, n: usize| (v - 0.5).clamp(0.0, n as f64 - 0.5);
    let steps = traj
        .steps
        .iter()
        .map(|s| s.map(|(x, y)| (clamp(x, shape.w), clamp(y, shape.h))))
        .collect();
    LatentTrajectory::new(steps, traj.local_text_id.clone())
}

/// The feature a token attends to and the scalar applied to it.
#[derive(Debug, Clone, Copy)]
pub struct CellSource<'a> {
    pub feature: &'a Array2<f64>,
    pub weight: f64,
    /// `None` for the global caption, else the trajectory index.
    pub traj: Option<usize>,
}

impl CellSource<'_> {
    /// `weight * feature`, the localized text feature of the cell.
    pub fn scaled_feature(&self) -> Array2<f64> {
        self.feature * self.weight
    }
}

/// Resolves every cell to its feature source. `locals[k]` describes
/// trajectory `k`.
pub fn conditioning_sources<'a>(
    field: &AssignmentField,
    locals: &'a [LocalText],
    global_feat: &'a Array2<f64>,
) -> Result<Vec<CellSource<'a>>> {
    if let Some(k) = field.max_traj_index() {
        if k >= locals.len() {
            return Err(Error::MissingFeature(format!("<trajectory {k}>")));
        }
    }
    let features: Vec<Option<&Array2<f64>>> =
        locals.iter().map(|l| l.feature.as_ref()).collect();
    field
        .cells
        .iter()
        .map(|c| match *c {
            Cell::Global => Ok(CellSource {
                feature: global_feat,
                weight: 1.0,
                traj: None,
            }),
            Cell::Local { traj, weight } => features[traj]
                .map(|feature| CellSource {
                    feature,
                    weight,
                    traj: Some(traj),
                })
                .ok_or_else(|| Error::MissingFeature(locals[traj].id.clone())),
        })
        .collect()
}
